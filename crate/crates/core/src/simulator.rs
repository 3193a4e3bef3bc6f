//! Synthetic two-sensor RGB-D rig.
//!
//! Scenes are analytic primitives rendered by per-pixel ray casting. A group of
//! primitives can swing about a vertical axis to emulate a person turning in a
//! chair. The world clock coincides with the LQ clock; HQ timestamps are
//! world time minus the injected offset, so `t_L = t_H + Δ`.

use image::{Rgb, RgbImage};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project, CameraIntrinsics, DepthImage, Mask, Pixel, Point3, RigidTransform, DEFAULT_MAX_RANGE_M,
};
use crate::groundtruth::AlignmentResult;
use crate::sequence_io::{Frame, Sensor, Sequence};
use crate::spatial_align::{Correspondence, CorrespondenceProvider, PairView};
use crate::temporal_align::{match_frames, TimeShift};

/// World time of the first nominal LQ frame.
pub const START_US: u64 = 1_000_000;
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane {
        point: Point3,
        normal: Vector3<f64>,
    },
    Sphere {
        center: Point3,
        radius: f64,
    },
    /// Oriented box; `rotation` is a rotation vector (axis times angle, rad).
    Box {
        center: Point3,
        half_extents: Vector3<f64>,
        #[serde(default)]
        rotation: Vector3<f64>,
    },
}

/// Surface coloring. `Tiles` splits space into cubes of side `size_m` and
/// scales the albedo by a per-cube pseudo-random factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Tiles { size_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [u8; 3],
    #[serde(default)]
    pub texture: Option<Texture>,
    /// Moves with the scene's group motion.
    #[serde(default)]
    pub animated: bool,
}

/// A 3D point given at rest (time of zero motion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub position: Point3,
    #[serde(default)]
    pub animated: bool,
}

/// Oscillating rotation of the animated group: angle `amplitude * sin(2π t / period)`
/// about `axis` through `pivot`, `t` in seconds of world time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMotion {
    pub pivot: Point3,
    pub axis: Vector3<f64>,
    pub amplitude_rad: f64,
    pub period_s: f64,
}

impl GroupMotion {
    pub fn angle(&self, t_us: u64) -> f64 {
        let t = t_us as f64 * 1e-6;
        self.amplitude_rad * (std::f64::consts::TAU * t / self.period_s).sin()
    }

    /// Rest -> world transform of the animated group at time `t_us`.
    pub fn transform_at(&self, t_us: u64) -> RigidTransform {
        let r = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(self.axis), self.angle(t_us));
        let p = self.pivot.coords;
        RigidTransform::new(r, p - r * p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub motion: Option<GroupMotion>,
}

struct Snapshot<'a> {
    scene: &'a SceneSpec,
    /// Rest -> world for the animated group, and its inverse.
    group: RigidTransform,
    inverse: RigidTransform,
    box_rotations: Vec<UnitQuaternion<f64>>,
}

impl Snapshot<'_> {
    /// Nearest hit of the world ray `o + t d`.
    fn cast(&self, o: &Point3, d: &Vector3<f64>) -> Option<Hit> {
        let (ro, rd) = (self.inverse.apply(o), self.inverse.rotation * d);
        let mut best: Option<Hit> = None;
        for (i, p) in self.scene.primitives.iter().enumerate() {
            let (oo, dd) = if p.animated { (&ro, &rd) } else { (o, d) };
            if let Some(t) = intersect(&p.shape, &self.box_rotations[i], oo, dd) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        primitive: i,
                        rest: oo + dd * t,
                    });
                }
            }
        }
        best
    }

    /// Hit through pixel `p` of a camera with pose `pose` (camera -> world).
    /// The ray is scaled so that its parameter equals camera depth.
    fn cast_pixel(&self, p: &Pixel, k: &CameraIntrinsics, pose: &RigidTransform) -> Option<Hit> {
        let d_cam = Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0);
        self.cast(&Point3::from(pose.translation), &(pose.rotation * d_cam))
    }

    /// World position of a hit.
    fn world(&self, hit: &Hit) -> Point3 {
        if self.scene.primitives[hit.primitive].animated {
            self.group.apply(&hit.rest)
        } else {
            hit.rest
        }
    }
}

/// Ray hit: parameter along the ray, primitive index, hit point in the primitive's rest frame.
#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    primitive: usize,
    rest: Point3,
}

fn hash3(x: i64, y: i64, z: i64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn intersect(shape: &Shape, box_inverse: &UnitQuaternion<f64>, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
    match shape {
        Shape::Plane { point, normal } => {
            let denom = d.dot(normal);
            if denom.abs() < RAY_EPS {
                return None;
            }
            let t = (point - o).dot(normal) / denom;
            (t > RAY_EPS).then_some(t)
        }
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > RAY_EPS)
        }
        Shape::Box {
            center, half_extents, ..
        } => {
            let lo = box_inverse * (o - center);
            let ld = box_inverse * d;
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..3 {
                if ld[i].abs() < RAY_EPS {
                    if lo[i].abs() > half_extents[i] {
                        return None;
                    }
                    continue;
                }
                let a = (-half_extents[i] - lo[i]) / ld[i];
                let b = (half_extents[i] - lo[i]) / ld[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 {
                return None;
            }
            [t0, t1].into_iter().find(|&t| t > RAY_EPS)
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("scene has no primitives"));
        }
        if self.anchors.len() < 8 {
            return Err(Error::invalid(format!(
                "scene needs at least 8 anchors, has {}",
                self.anchors.len()
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Plane { point, normal } => point.coords.norm() < DEFAULT_MAX_RANGE_M && normal.norm() > 0.0,
                Shape::Sphere { center, radius } => {
                    *radius > 0.0 && center.coords.norm() + radius < DEFAULT_MAX_RANGE_M
                }
                Shape::Box {
                    center, half_extents, ..
                } => {
                    half_extents.iter().all(|&h| h > 0.0)
                        && center.coords.norm() + half_extents.norm() < DEFAULT_MAX_RANGE_M
                }
            };
            if !ok {
                return Err(Error::invalid(format!("primitive {i} is degenerate or out of range")));
            }
            if let Some(Texture::Tiles { size_m }) = p.texture {
                if !(size_m > 0.0) {
                    return Err(Error::invalid(format!("primitive {i} has non-positive tile size")));
                }
            }
        }
        if let Some(m) = &self.motion {
            if !(m.period_s > 0.0 && m.axis.norm() > 0.0 && m.amplitude_rad.is_finite()) {
                return Err(Error::invalid(
                    "group motion needs a positive period and a non-zero axis",
                ));
            }
        }
        Ok(())
    }

    /// Rest -> world transform of the animated group.
    fn group_at(&self, t_us: u64) -> RigidTransform {
        self.motion
            .map_or_else(RigidTransform::identity, |m| m.transform_at(t_us))
    }

    /// World position of an anchor at `t_us`.
    pub fn anchor_at(&self, a: &Anchor, t_us: u64) -> Point3 {
        if a.animated {
            self.group_at(t_us).apply(&a.position)
        } else {
            a.position
        }
    }

    /// The scene frozen at `t_us`, ready for ray casting.
    fn at(&self, t_us: u64) -> Snapshot<'_> {
        let group = self.group_at(t_us);
        Snapshot {
            scene: self,
            group,
            inverse: group.inverse(),
            box_rotations: self
                .primitives
                .iter()
                .map(|p| match &p.shape {
                    Shape::Box { rotation, .. } => UnitQuaternion::from_scaled_axis(*rotation).inverse(),
                    _ => UnitQuaternion::identity(),
                })
                .collect(),
        }
    }

    fn shade(&self, hit: &Hit) -> Rgb<u8> {
        let p = &self.primitives[hit.primitive];
        match p.texture {
            None => Rgb(p.albedo),
            Some(Texture::Tiles { size_m }) => {
                let c = |v: f64| (v / size_m).floor() as i64;
                let f = 0.3 + 0.7 * hash3(c(hit.rest.x), c(hit.rest.y), c(hit.rest.z));
                Rgb(p.albedo.map(|a| (a as f64 * f).round() as u8))
            }
        }
    }

    /// A default indoor scene: textured back wall and floor, a static side
    /// pillar and ball, and a swinging torso-and-head group about 2 m away.
    pub fn demo() -> Self {
        let tiles = |s| Some(Texture::Tiles { size_m: s });
        let fixed = |position| Anchor {
            position,
            animated: false,
        };
        let moving = |position| Anchor {
            position,
            animated: true,
        };
        let mut anchors = Vec::new();
        for &x in &[-1.5, -0.9, -0.3, 0.3, 0.9, 1.5] {
            for &y in &[-0.9, -0.4, 0.1, 0.6] {
                anchors.push(fixed(Point3::new(x, y, 4.0)));
            }
        }
        for &x in &[-1.2, -0.4, 0.4, 1.2] {
            for &z in &[3.0, 3.5] {
                anchors.push(fixed(Point3::new(x, 1.0, z)));
            }
        }
        let pillar = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.3, 0.0));
        for &lx in &[-0.05, 0.05] {
            for &ly in &[-0.6, -0.2, 0.2, 0.6] {
                anchors.push(fixed(
                    Point3::new(-0.75, 0.0, 2.8) + pillar * Vector3::new(lx, ly, -0.1),
                ));
            }
        }
        let on_sphere = |center: Point3, radius: f64, dx: f64, dy: f64| {
            center + Vector3::new(dx, dy, -(radius * radius - dx * dx - dy * dy).sqrt())
        };
        for &(dx, dy) in &[(0.0, 0.0), (-0.12, -0.1), (0.12, -0.1), (-0.12, 0.1), (0.12, 0.1)] {
            anchors.push(fixed(on_sphere(Point3::new(0.85, 0.3, 2.85), 0.25, dx, dy)));
        }
        for &x in &[-0.2, 0.0, 0.2] {
            for &y in &[-0.1, 0.15, 0.4] {
                anchors.push(moving(Point3::new(x, y, 2.05)));
            }
        }
        for &(dx, dy) in &[(0.0, 0.0), (-0.08, -0.06), (0.08, -0.06), (0.0, 0.08)] {
            anchors.push(moving(on_sphere(Point3::new(0.0, -0.45, 2.25), 0.15, dx, dy)));
        }
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Plane {
                        point: Point3::new(0.0, 0.0, 4.0),
                        normal: Vector3::new(0.0, 0.0, -1.0),
                    },
                    albedo: [210, 190, 160],
                    texture: tiles(0.23),
                    animated: false,
                },
                Primitive {
                    shape: Shape::Plane {
                        point: Point3::new(0.0, 1.0, 0.0),
                        normal: Vector3::new(0.0, -1.0, 0.0),
                    },
                    albedo: [120, 160, 200],
                    texture: tiles(0.29),
                    animated: false,
                },
                Primitive {
                    shape: Shape::Box {
                        center: Point3::new(-0.75, 0.0, 2.8),
                        half_extents: Vector3::new(0.1, 1.0, 0.1),
                        rotation: Vector3::new(0.0, 0.3, 0.0),
                    },
                    albedo: [90, 200, 90],
                    texture: tiles(0.07),
                    animated: false,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Point3::new(0.85, 0.3, 2.85),
                        radius: 0.25,
                    },
                    albedo: [230, 120, 60],
                    texture: tiles(0.06),
                    animated: false,
                },
                Primitive {
                    shape: Shape::Box {
                        center: Point3::new(0.0, 0.15, 2.25),
                        half_extents: Vector3::new(0.3, 0.35, 0.2),
                        rotation: Vector3::zeros(),
                    },
                    albedo: [200, 60, 80],
                    texture: tiles(0.055),
                    animated: true,
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Point3::new(0.0, -0.45, 2.25),
                        radius: 0.15,
                    },
                    albedo: [240, 200, 170],
                    texture: tiles(0.04),
                    animated: true,
                },
            ],
            anchors,
            motion: Some(GroupMotion {
                pivot: Point3::new(0.0, 0.0, 2.25),
                axis: Vector3::new(0.0, 1.0, 0.0),
                amplitude_rad: 0.8,
                period_s: 3.0,
            }),
        }
    }

    /// The same scene without motion.
    pub fn without_motion(mut self) -> Self {
        self.motion = None;
        self
    }
}

/// Per-sensor depth noise: Gaussian with `σ(z) = sigma_mm + sigma_quadratic_mm · z²`
/// (z in meters) and independent per-pixel dropout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    #[serde(default)]
    pub sigma_mm: f64,
    #[serde(default)]
    pub sigma_quadratic_mm: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl NoiseModel {
    pub fn is_noiseless(&self) -> bool {
        self.sigma_mm == 0.0 && self.sigma_quadratic_mm == 0.0 && self.dropout == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub intrinsics: CameraIntrinsics,
    pub fps: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Depth quantization step; 0 disables quantization.
    #[serde(default)]
    pub quantization_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub lq: SensorSpec,
    pub hq: SensorSpec,
    /// True HQ -> LQ transform.
    pub extrinsic: RigidTransform,
    /// True clock offset: `t_L = t_H + delta_ms`.
    pub delta_ms: f64,
    /// World-time offset of the first nominal HQ frame relative to the first LQ frame.
    #[serde(default)]
    pub hq_start_offset_ms: f64,
    /// LQ camera -> world.
    #[serde(default = "RigidTransform::identity")]
    pub lq_pose: RigidTransform,
}

impl RigSpec {
    /// HQ camera -> world.
    pub fn hq_pose(&self) -> RigidTransform {
        self.lq_pose.compose(&self.extrinsic)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("LQ", &self.lq), ("HQ", &self.hq)] {
            let n = &s.noise;
            if !(s.fps > 0.0 && s.jitter_ms >= 0.0 && s.quantization_mm >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} sensor needs fps > 0 and non-negative jitter and quantization"
                )));
            }
            if !(n.sigma_mm >= 0.0 && n.sigma_quadratic_mm >= 0.0 && (0.0..1.0).contains(&n.dropout)) {
                return Err(Error::invalid(format!(
                    "{name} noise needs non-negative sigmas and dropout in [0, 1)"
                )));
            }
        }
        if !(self.delta_ms.abs() * 1000.0 < START_US as f64 / 2.0) || !self.hq_start_offset_ms.is_finite() {
            return Err(Error::invalid(format!(
                "clock offset {} ms is out of range",
                self.delta_ms
            )));
        }
        Ok(())
    }

    /// A 160x120 LQ / 128x96 HQ rig with a small rotation and 8 cm baseline.
    pub fn demo(delta_ms: f64) -> Self {
        Self {
            lq: SensorSpec {
                intrinsics: CameraIntrinsics::new(150.0, 150.0, 79.5, 59.5, 160, 120).expect("valid"),
                fps: 30.0,
                jitter_ms: 1.0,
                noise: NoiseModel::default(),
                quantization_mm: 0.0,
            },
            hq: SensorSpec {
                intrinsics: CameraIntrinsics::new(125.0, 125.0, 63.5, 47.5, 128, 96).expect("valid"),
                fps: 27.0,
                jitter_ms: 1.0,
                noise: NoiseModel::default(),
                quantization_mm: 0.0,
            },
            extrinsic: RigidTransform::from_axis_angle(
                Vector3::new(0.2, 1.0, 0.1),
                3f64.to_radians(),
                Vector3::new(0.08, -0.01, 0.005),
            ),
            delta_ms,
            hq_start_offset_ms: 0.0,
            lq_pose: RigidTransform::identity(),
        }
    }
}

/// Renders a noiseless frame; `pose` maps camera to world. Pixels without a
/// hit closer than the maximum range are missing (zero depth, black color).
/// The frame's mask marks pixels on animated primitives.
pub fn render_frame(scene: &SceneSpec, k: &CameraIntrinsics, pose: &RigidTransform, t_us: u64) -> Frame {
    let (w, h) = k.dimensions();
    let mut depth = vec![0.0; k.pixel_count()];
    let mut color = RgbImage::new(w, h);
    let mut mask = Mask::new(w, h, false);
    let snap = scene.at(t_us);
    for v in 0..h {
        for u in 0..w {
            let Some(hit) = snap.cast_pixel(&Pixel::new(u as f64, v as f64), k, pose) else {
                continue;
            };
            if hit.t >= DEFAULT_MAX_RANGE_M {
                continue;
            }
            depth[(v * w + u) as usize] = hit.t;
            color.put_pixel(u, v, scene.shade(&hit));
            mask.set(u, v, scene.primitives[hit.primitive].animated);
        }
    }
    let depth = DepthImage::from_values(w, h, depth).expect("ray hits are positive and in range");
    Frame {
        color,
        depth,
        timestamp_us: t_us,
        mask: Some(mask),
    }
}

fn stream_id(sensor: Sensor, index: usize) -> u64 {
    let tag = match sensor {
        Sensor::Lq => 1u64,
        Sensor::Hq => 2u64,
    };
    (tag << 40) | index as u64
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Nominal world times `start + i / fps` with Gaussian jitter, rounded to
/// microseconds and forced strictly increasing.
fn timestamp_train(s: &SensorSpec, start_us: f64, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let n = (duration_s * s.fps + 1e-9).floor() as usize;
    let jitter = Normal::new(0.0, s.jitter_ms * 1000.0).expect("jitter validated");
    let mut out: Vec<u64> = Vec::with_capacity(n);
    for i in 0..n {
        let t = start_us + i as f64 * 1e6 / s.fps + jitter.sample(rng);
        let t = t.round().max(0.0) as u64;
        let t = match out.last() {
            Some(&p) if t <= p => p + 1,
            _ => t,
        };
        out.push(t);
    }
    out
}

fn degrade(frame: &mut Frame, s: &SensorSpec, rng: &mut ChaCha8Rng) {
    let n = &s.noise;
    let q = s.quantization_mm;
    if n.is_noiseless() && q == 0.0 {
        return;
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    for d in frame.depth.values_mut() {
        // Draw both variates for every pixel so streams stay aligned across settings.
        let z = std.sample(rng);
        let drop = rng.random::<f64>() < n.dropout;
        if *d <= 0.0 {
            continue;
        }
        if drop {
            *d = 0.0;
            continue;
        }
        let sigma_m = (n.sigma_mm + n.sigma_quadratic_mm * *d * *d) * 1e-3;
        let mut v = *d + sigma_m * z;
        if q > 0.0 {
            let step = q * 1e-3;
            v = (v / step).round() * step;
        }
        *d = if v > 0.0 && v < DEFAULT_MAX_RANGE_M { v } else { 0.0 };
    }
}

/// Output of [`record_pair`].
#[derive(Debug, Clone)]
pub struct Recording {
    pub lq: Sequence,
    pub hq: Sequence,
    /// True offset, extrinsic and the frame mapping at the true offset.
    pub truth: AlignmentResult,
}

/// Records both sensors for `duration_s` seconds of world time. Each frame is
/// rendered at its true world time and then degraded with its own RNG stream,
/// so the output depends only on the inputs and `seed`.
pub fn record_pair(scene: &SceneSpec, rig: &RigSpec, duration_s: f64, seed: u64) -> Result<Recording> {
    scene.validate()?;
    rig.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    let shift = TimeShift::new(rig.delta_ms);
    let delta_us = shift.delta_us();
    let world_lq = timestamp_train(&rig.lq, START_US as f64, duration_s, &mut rng_for(seed, 1 << 48));
    let world_hq = timestamp_train(
        &rig.hq,
        START_US as f64 + rig.hq_start_offset_ms * 1000.0,
        duration_s,
        &mut rng_for(seed, 2 << 48),
    );
    if world_hq.first().is_some_and(|&t| (t as i64) < delta_us) {
        return Err(Error::invalid(
            "HQ timestamps would be negative; reduce the HQ start offset",
        ));
    }

    let render = |sensor: Sensor, spec: &SensorSpec, pose: RigidTransform, world: &[u64]| -> Vec<Frame> {
        world
            .par_iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut f = render_frame(scene, &spec.intrinsics, &pose, t);
                degrade(&mut f, spec, &mut rng_for(seed, stream_id(sensor, i)));
                if sensor == Sensor::Hq {
                    f.timestamp_us = (t as i64 - delta_us) as u64;
                }
                f
            })
            .collect()
    };
    let lq_frames = render(Sensor::Lq, &rig.lq, rig.lq_pose, &world_lq);
    let hq_frames = render(Sensor::Hq, &rig.hq, rig.hq_pose(), &world_hq);
    let lq = Sequence::new("lq", Sensor::Lq, rig.lq.intrinsics, lq_frames)?;
    let hq = Sequence::new("hq", Sensor::Hq, rig.hq.intrinsics, hq_frames)?;
    let mapping = match_frames(&lq, &hq, shift);
    Ok(Recording {
        truth: AlignmentResult {
            shift,
            transform: rig.extrinsic,
            mapping,
            residual_px: 0.0,
        },
        lq,
        hq,
    })
}

/// Correspondences from the scene's anchors under the true rig.
///
/// For each anchor visible in the HQ frame, the HQ pixel is the anchor's
/// projection rounded to the nearest pixel; the surface point seen through that
/// pixel is carried to the LQ frame's world time (following the group motion if
/// it lies on an animated primitive) and projected into the LQ camera. These are
/// the matches a perfect detector would report, including the displacement
/// caused by any time gap between the two frames.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    scene: SceneSpec,
    rig: RigSpec,
    /// Fraction of matches whose LQ pixel is replaced by a wrong nearby pixel.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl OracleProvider {
    pub fn new(scene: SceneSpec, rig: RigSpec) -> Self {
        Self {
            scene,
            rig,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn with_outliers(mut self, fraction: f64, seed: u64) -> Self {
        self.outlier_fraction = fraction;
        self.seed = seed;
        self
    }
}

/// A wrong match: the true LQ pixel displaced by 5 to 40 px in a random
/// direction, as a detector confusing similar patches inside its search window
/// would produce. The displacement is mirrored if it leaves the image.
fn outlier(p: &Pixel, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Pixel {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(5.0..40.0);
    let offset = nalgebra::Vector2::new(angle.cos(), angle.sin()) * r;
    let max = Pixel::new(k.width as f64 - 1.0, k.height as f64 - 1.0);
    let mut q = p + offset;
    for i in 0..2 {
        if q[i] < 0.0 || q[i] > max[i] {
            q[i] = p[i] - offset[i];
        }
        q[i] = q[i].clamp(0.0, max[i]);
    }
    q
}

/// Maximum distance between an anchor and the surface point found through its
/// rounded pixel before the anchor is treated as occluded.
const ANCHOR_TOLERANCE_M: f64 = 0.05;
/// Allowed gap between the ray hit and the carried point in the LQ view.
const VISIBILITY_TOLERANCE_M: f64 = 0.01;

impl CorrespondenceProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn needs_reprojection(&self) -> bool {
        false
    }

    fn correspondences(&self, view: &PairView<'_>) -> Result<Vec<Correspondence>> {
        let delta_us = TimeShift::new(self.rig.delta_ms).delta_us();
        let t_lq = view.lq.timestamp_us;
        let t_hq = (view.hq.timestamp_us as i64 + delta_us) as u64;
        let hq_pose = self.rig.hq_pose();
        let hq_from_world = hq_pose.inverse();
        let lq_from_world = self.rig.lq_pose.inverse();
        let (snap_lq, snap_hq) = (self.scene.at(t_lq), self.scene.at(t_hq));
        let carry = snap_lq.group.compose(&snap_hq.inverse);
        let mut rng = rng_for(self.seed, ((view.lq_index as u64) << 32) | view.hq_index as u64);

        let mut out = Vec::new();
        for a in &self.scene.anchors {
            let world = self.scene.anchor_at(a, t_hq);
            let Ok((p, _)) = project(&hq_from_world.apply(&world), view.k_hq) else {
                continue;
            };
            let Some((u, v)) = view.k_hq.nearest_pixel(&p) else {
                continue;
            };
            if !view.hq.depth.is_valid(u, v) {
                continue;
            }
            let Some(hit) = snap_hq.cast_pixel(&Pixel::new(u as f64, v as f64), view.k_hq, &hq_pose) else {
                continue;
            };
            let prim = &self.scene.primitives[hit.primitive];
            let surface = snap_hq.world(&hit);
            if prim.animated != a.animated || (surface - world).norm() > ANCHOR_TOLERANCE_M {
                continue;
            }
            let moved = if prim.animated { carry.apply(&surface) } else { surface };
            let Ok((p_lq, z)) = project(&lq_from_world.apply(&moved), view.k_lq) else {
                continue;
            };
            if !view.k_lq.contains(&p_lq) {
                continue;
            }
            match snap_lq.cast_pixel(&p_lq, view.k_lq, &self.rig.lq_pose) {
                Some(h) if (h.t - z).abs() <= VISIBILITY_TOLERANCE_M => {}
                _ => continue,
            }
            let lq = if self.outlier_fraction > 0.0 && rng.random::<f64>() < self.outlier_fraction {
                outlier(&p_lq, view.k_lq, &mut rng)
            } else {
                p_lq
            };
            out.push(Correspondence { lq, hq: (u, v) });
        }
        Ok(out)
    }
}
