//! Pinhole cameras, rigid transforms, depth images and the z-buffered
//! unproject / transform / project reprojection kernel.
//!
//! Conventions: camera coordinates are x right, y down, z forward, in meters.
//! Pixel coordinates address pixel centers, so pixel `(u, v)` covers the
//! continuous square `[u - 0.5, u + 0.5) x [v - 0.5, v + 0.5)`. A projected
//! point lands on the pixel obtained by rounding each coordinate to the nearest
//! integer, with ties rounded away from zero.

use image::RgbImage;
use nalgebra::{Matrix3, Point2, Quaternion, Unit, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D point in camera coordinates (meters).
pub type Point3 = nalgebra::Point3<f64>;

/// A continuous pixel coordinate.
pub type Pixel = Point2<f64>;

/// Default upper bound on representable depth, in meters.
pub const DEFAULT_MAX_RANGE_M: f64 = 10.0;

/// Ideal pinhole camera parameters. No lens distortion is modeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx.is_finite() && fx > 0.0 && fy.is_finite() && fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics with the principal point at the image center and equal focal lengths.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Whether a continuous pixel coordinate falls on some pixel of the image.
    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= -0.5 && p.x < self.width as f64 - 0.5 && p.y >= -0.5 && p.y < self.height as f64 - 0.5
    }

    /// Nearest integer pixel for a continuous coordinate, if inside the image.
    pub fn nearest_pixel(&self, p: &Pixel) -> Option<(u32, u32)> {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return None;
        }
        let u = p.x.round();
        let v = p.y.round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as u32, v as u32))
    }
}

/// Back-projects pixel `p` with metric `depth` into camera space.
pub fn unproject(p: &Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Point3> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::invalid(format!(
            "unproject requires positive depth, got {depth}"
        )));
    }
    if !k.contains(p) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) outside {}x{} image",
            p.x, p.y, k.width, k.height
        )));
    }
    Ok(Point3::new(
        (p.x - k.cx) * depth / k.fx,
        (p.y - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Projects a camera-space point onto the image plane, returning the pixel
/// coordinate and the depth. The pixel may lie outside the image.
pub fn project(point: &Point3, k: &CameraIntrinsics) -> Result<(Pixel, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok((
        Pixel::new(k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy),
        point.z,
    ))
}

/// Rotation plus translation mapping points from a source camera frame into a
/// destination camera frame: `x' = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRepr", try_from = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// On-disk form: `{"quaternion": [w, x, y, z], "translation": [x, y, z]}`.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    quaternion: [f64; 4],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let q = t.rotation.quaternion();
        TransformRepr {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        let [w, x, y, z] = r.quaternion;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n.is_finite() && n > 0.0) || r.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "transform must have a finite non-zero quaternion and finite translation",
            ));
        }
        // Already-unit quaternions are kept bit-exact so files round-trip.
        let rotation = if (n - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(RigidTransform {
            rotation,
            translation: Vector3::from(r.translation),
        })
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(axis, 1e-12) {
            Some(axis) => UnitQuaternion::from_axis_angle(&axis, angle),
            None => UnitQuaternion::identity(),
        };
        Self::new(rotation, translation)
    }

    /// Builds a transform from `[qw, qx, qy, qz, tx, ty, tz]`; the quaternion
    /// part is normalized.
    pub fn from_params(p: &[f64; 7]) -> Self {
        let q = Quaternion::new(p[0], p[1], p[2], p[3]);
        Self::new(UnitQuaternion::from_quaternion(q), Vector3::new(p[4], p[5], p[6]))
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn params(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            q.w,
            q.i,
            q.j,
            q.k,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Angle (radians) of the relative rotation between two transforms.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Applies a rigid transform to a point.
pub fn apply_transform(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

/// Per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "mask of {} bits does not fit {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Pixel-wise conjunction. Panics on dimension mismatch.
    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!(self.dimensions(), other.dimensions());
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Metric depth image. A value of zero marks a missing measurement, so the
/// validity mask is exactly the set of strictly positive pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DepthImage {
    /// An image with every pixel missing.
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    /// Validates values against [`DEFAULT_MAX_RANGE_M`].
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        Self::from_values_with_range(width, height, values, DEFAULT_MAX_RANGE_M)
    }

    pub fn from_values_with_range(width: u32, height: u32, values: Vec<f64>, max_range: f64) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "{} depth values do not fit {width}x{height}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0 && **v < max_range))
        {
            return Err(Error::invalid(format!(
                "depth value {v} at index {i} not in [0, {max_range}) m"
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::from_values(width, height, values)
    }

    /// Converts 16-bit millimeter samples (0 = missing) into meters.
    pub fn from_millimeters(width: u32, height: u32, mm: &[u16]) -> Result<Self> {
        let values = mm.iter().map(|&v| v as f64 / 1000.0).collect();
        Self::from_values_with_range(width, height, values, f64::INFINITY)
    }

    /// Rounds to whole millimeters; errors if a value exceeds the 16-bit range.
    pub fn to_millimeters(&self) -> Result<Vec<u16>> {
        self.values
            .iter()
            .map(|&v| {
                let mm = (v * 1000.0).round();
                if mm > u16::MAX as f64 {
                    Err(Error::invalid(format!("depth {v} m exceeds 16-bit millimeters")))
                } else {
                    Ok(mm as u16)
                }
            })
            .collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|v| *v > 0.0).collect(),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Output of a z-buffered reprojection.
#[derive(Debug, Clone)]
pub struct Reprojection {
    pub depth: DepthImage,
    pub color: Option<RgbImage>,
    /// For each destination pixel, the linear index of the source pixel that
    /// won the z-buffer, if any.
    pub source: Vec<Option<u32>>,
}

impl Reprojection {
    /// Source pixel `(x, y)` that landed on destination pixel `(u, v)`.
    pub fn source_pixel(&self, u: u32, v: u32, src_width: u32) -> Option<(u32, u32)> {
        let idx = v as usize * self.depth.width() as usize + u as usize;
        self.source[idx].map(|s| (s % src_width, s / src_width))
    }
}

/// Reprojects a depth image (and its registered color image) from a source
/// camera into a destination camera related by `t` (source -> destination).
pub fn reproject_depth(
    src_depth: &DepthImage,
    src_color: &RgbImage,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    t: &RigidTransform,
) -> Result<(DepthImage, RgbImage)> {
    let r = reproject(src_depth, Some(src_color), k_src, k_dst, t)?;
    Ok((r.depth, r.color.expect("color requested")))
}

/// Like [`reproject_depth`], with optional color and the winning-source map.
///
/// Each valid source pixel is splatted onto its nearest destination pixel.
/// Collisions keep the smallest destination depth; equal depths keep the
/// smallest source index, so the result does not depend on thread count.
pub fn reproject(
    src_depth: &DepthImage,
    src_color: Option<&RgbImage>,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    t: &RigidTransform,
) -> Result<Reprojection> {
    if src_depth.dimensions() != k_src.dimensions() {
        return Err(Error::invalid(format!(
            "source depth is {}x{} but intrinsics are {}x{}",
            src_depth.width(),
            src_depth.height(),
            k_src.width,
            k_src.height
        )));
    }
    if let Some(c) = src_color {
        if c.dimensions() != k_src.dimensions() {
            return Err(Error::invalid(format!(
                "source color is {}x{} but intrinsics are {}x{}",
                c.width(),
                c.height(),
                k_src.width,
                k_src.height
            )));
        }
    }

    let sw = k_src.width as usize;
    let dw = k_dst.width as usize;
    let rot = t.rotation_matrix();

    // (destination index, destination depth, source index), in source order.
    let splats: Vec<(usize, f64, u32)> = src_depth
        .values()
        .par_chunks(sw)
        .enumerate()
        .flat_map_iter(|(y, row)| {
            row.iter().enumerate().filter_map(move |(x, &d)| {
                if d <= 0.0 {
                    return None;
                }
                let p = Point3::new(
                    (x as f64 - k_src.cx) * d / k_src.fx,
                    (y as f64 - k_src.cy) * d / k_src.fy,
                    d,
                );
                let q = Point3::from(rot * p.coords + t.translation);
                if !(q.z > 0.0 && q.z < DEFAULT_MAX_RANGE_M) {
                    return None;
                }
                let px = Pixel::new(k_dst.fx * q.x / q.z + k_dst.cx, k_dst.fy * q.y / q.z + k_dst.cy);
                let (u, v) = k_dst.nearest_pixel(&px)?;
                Some((v as usize * dw + u as usize, q.z, (y * sw + x) as u32))
            })
        })
        .collect();

    let mut zbuf = vec![f64::INFINITY; k_dst.pixel_count()];
    let mut source: Vec<Option<u32>> = vec![None; k_dst.pixel_count()];
    for (dst, z, src) in splats {
        if z < zbuf[dst] {
            zbuf[dst] = z;
            source[dst] = Some(src);
        }
    }

    let mut depth = DepthImage::empty(k_dst.width, k_dst.height);
    for (out, z) in depth.values_mut().iter_mut().zip(&zbuf) {
        if z.is_finite() {
            *out = *z;
        }
    }

    let color = src_color.map(|c| {
        RgbImage::from_fn(k_dst.width, k_dst.height, |u, v| {
            match source[v as usize * dw + u as usize] {
                Some(s) => *c.get_pixel(s % k_src.width, s / k_src.width),
                None => image::Rgb([0, 0, 0]),
            }
        })
    });

    Ok(Reprojection { depth, color, source })
}
