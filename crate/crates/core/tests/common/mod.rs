#![allow(dead_code)]

use depthpair::geometry::{Point3, RigidTransform};
use depthpair::simulator::{Primitive, SceneSpec, Shape, Texture};
use nalgebra::Vector3;
use rand::Rng;

/// Static scene whose visible surfaces all face the LQ camera: the demo wall
/// plus three axis-aligned boxes at different depths. Depth varies by less
/// than a millimeter across a pixel except at occlusion edges.
pub fn facing_boxes_scene() -> SceneSpec {
    let mut scene = SceneSpec::demo().without_motion();
    scene.primitives.truncate(1);
    scene.anchors.retain(|a| a.position.z == 4.0);
    let boxes = [
        ((-0.7, 0.0, 2.5), (0.3, 0.6, 0.2), [200, 80, 60]),
        ((0.2, -0.1, 2.0), (0.25, 0.35, 0.15), [60, 200, 80]),
        ((0.9, 0.4, 3.2), (0.3, 0.3, 0.3), [80, 60, 200]),
    ];
    for (c, h, albedo) in boxes {
        scene.primitives.push(Primitive {
            shape: Shape::Box {
                center: Point3::new(c.0, c.1, c.2),
                half_extents: Vector3::new(h.0, h.1, h.2),
                rotation: Vector3::zeros(),
            },
            albedo,
            texture: Some(Texture::Tiles { size_m: 0.1 }),
            animated: false,
        });
    }
    scene
}

/// Random rigid transform with rotation angle below `max_deg` and
/// translation norm below `max_m`.
pub fn random_transform(rng: &mut impl Rng, max_deg: f64, max_m: f64) -> RigidTransform {
    let mut unit = || loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let axis = unit();
    let dir = unit();
    let angle = rng.random_range(0.0..max_deg).to_radians();
    let t = dir * rng.random_range(0.0..max_m);
    RigidTransform::from_axis_angle(axis, angle, t)
}
