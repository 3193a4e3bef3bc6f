//! Image-plane correspondence loss and its analytic gradient with respect to
//! the seven transform parameters `[qw, qx, qy, qz, tx, ty, tz]`.
//!
//! For an HQ point `X` and its LQ target pixel `p`, the residual is
//! `r = π_L(R(q̂) X + t) - p` with `q̂ = q / |q|`, and the per-pair term is
//! `|r|` (or its Huber-smoothed form). The rotation is differentiated through
//! the quaternion normalization, so the gradient has no component along `q`.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraIntrinsics, DepthImage, Pixel, Point3, RigidTransform};

/// Points whose transformed depth is at or below this value (meters) are
/// excluded from the loss.
pub const MIN_DEPTH_M: f64 = 1e-4;

const CHUNK: usize = 512;

/// Per-pair penalty applied to the pixel distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Plain Euclidean distance.
    Distance,
    /// Quadratic below `delta` pixels, linear above, with unit slope in the tail.
    Huber { delta: f64 },
}

impl Penalty {
    pub fn from_huber(delta: Option<f64>) -> Self {
        match delta {
            Some(delta) => Penalty::Huber { delta },
            None => Penalty::Distance,
        }
    }

    fn value(&self, d: f64) -> f64 {
        match *self {
            Penalty::Distance => d,
            Penalty::Huber { delta } if d <= delta => d * d / (2.0 * delta),
            Penalty::Huber { delta } => d - delta / 2.0,
        }
    }

    /// Derivative of the penalty divided by the distance, so that the gradient
    /// of the term is `weight * J^T r`. Zero distance contributes nothing.
    fn weight(&self, d: f64) -> f64 {
        match *self {
            Penalty::Distance if d > 0.0 => 1.0 / d,
            Penalty::Distance => 0.0,
            Penalty::Huber { delta } if d <= delta => 1.0 / delta,
            Penalty::Huber { .. } => 1.0 / d,
        }
    }
}

/// Loss value, gradient and bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Sum of per-pair penalties, in pixels.
    pub loss: f64,
    pub gradient: [f64; 7],
    /// Terms included in the sum.
    pub used: usize,
    /// Terms dropped because the transformed point had depth <= `MIN_DEPTH_M`.
    pub dropped: usize,
}

impl LossValue {
    fn zero() -> Self {
        Self {
            loss: 0.0,
            gradient: [0.0; 7],
            used: 0,
            dropped: 0,
        }
    }

    fn add(mut self, other: &LossValue) -> Self {
        self.loss += other.loss;
        for (a, b) in self.gradient.iter_mut().zip(&other.gradient) {
            *a += b;
        }
        self.used += other.used;
        self.dropped += other.dropped;
        self
    }
}

/// An HQ camera-space point and the LQ pixel it should project to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point: Point3,
    pub target: Pixel,
}

/// Precomputed observations for repeated loss evaluation.
#[derive(Debug, Clone)]
pub struct ReprojectionObjective {
    observations: Vec<Observation>,
    k_lq: CameraIntrinsics,
    penalty: Penalty,
}

impl ReprojectionObjective {
    pub fn new(observations: Vec<Observation>, k_lq: CameraIntrinsics, penalty: Penalty) -> Self {
        Self {
            observations,
            k_lq,
            penalty,
        }
    }

    /// Unprojects every HQ pixel of a correspondence set with its HQ depth.
    pub fn from_correspondences(
        corr: &CorrespondenceSet,
        hq_depths: &[&DepthImage],
        k_hq: &CameraIntrinsics,
        k_lq: &CameraIntrinsics,
        penalty: Penalty,
    ) -> Result<Self> {
        if corr.total() == 0 {
            return Err(Error::invalid("correspondence set is empty"));
        }
        if hq_depths.len() != corr.pairs.len() {
            return Err(Error::invalid(format!(
                "{} depth images supplied for {} frame pairs",
                hq_depths.len(),
                corr.pairs.len()
            )));
        }
        let mut observations = Vec::with_capacity(corr.total());
        for (pair, depth) in corr.pairs.iter().zip(hq_depths) {
            if depth.dimensions() != k_hq.dimensions() {
                return Err(Error::invalid("HQ depth does not match HQ intrinsics"));
            }
            for m in &pair.matches {
                let (u, v) = m.hq;
                if u >= k_hq.width || v >= k_hq.height {
                    return Err(Error::invalid(format!("HQ pixel ({u}, {v}) out of bounds")));
                }
                if !k_lq.contains(&m.lq) {
                    return Err(Error::invalid(format!(
                        "LQ pixel ({}, {}) out of bounds",
                        m.lq.x, m.lq.y
                    )));
                }
                let z = depth.get(u, v);
                if z <= 0.0 {
                    return Err(Error::invalid(format!(
                        "HQ pixel ({u}, {v}) of pair {} has no depth",
                        pair.lq_index
                    )));
                }
                observations.push(Observation {
                    point: unproject(&Pixel::new(u as f64, v as f64), z, k_hq)?,
                    target: m.lq,
                });
            }
        }
        Ok(Self::new(observations, *k_lq, penalty))
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn with_penalty(&self, penalty: Penalty) -> Self {
        Self {
            penalty,
            ..self.clone()
        }
    }

    /// Loss and gradient at `params`. Chunks are reduced in a fixed order, so
    /// the result is independent of the thread count.
    pub fn evaluate(&self, params: &[f64; 7]) -> LossValue {
        let frame = ParamFrame::new(params);
        let partials: Vec<LossValue> = self
            .observations
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk.iter().fold(LossValue::zero(), |acc, obs| {
                    acc.add(&frame.term(obs, &self.k_lq, self.penalty, true))
                })
            })
            .collect();
        partials.iter().fold(LossValue::zero(), |a, b| a.add(b))
    }

    /// Loss only (no gradient).
    pub fn value(&self, params: &[f64; 7]) -> LossValue {
        let frame = ParamFrame::new(params);
        let partials: Vec<LossValue> = self
            .observations
            .par_chunks(CHUNK)
            .map(|chunk| {
                chunk.iter().fold(LossValue::zero(), |acc, obs| {
                    acc.add(&frame.term(obs, &self.k_lq, self.penalty, false))
                })
            })
            .collect();
        partials.iter().fold(LossValue::zero(), |a, b| a.add(b))
    }

    /// Per-observation pixel distances at `t`; `None` for dropped terms.
    pub fn distances(&self, t: &RigidTransform) -> Vec<Option<f64>> {
        self.observations
            .iter()
            .map(|o| {
                let p = t.apply(&o.point);
                if p.z <= MIN_DEPTH_M {
                    return None;
                }
                let u = self.k_lq.fx * p.x / p.z + self.k_lq.cx;
                let v = self.k_lq.fy * p.y / p.z + self.k_lq.cy;
                Some(((u - o.target.x).powi(2) + (v - o.target.y).powi(2)).sqrt())
            })
            .collect()
    }
}

/// Rotation, its derivatives and the normalization Jacobian for one
/// parameter vector.
struct ParamFrame {
    w: f64,
    v: Vector3<f64>,
    rot: Matrix3<f64>,
    t: Vector3<f64>,
    /// d q̂ / d q = (I - q̂ q̂ᵀ) / |q|
    normalize: nalgebra::Matrix4<f64>,
}

impl ParamFrame {
    fn new(p: &[f64; 7]) -> Self {
        let q = Vector4::new(p[0], p[1], p[2], p[3]);
        let n = q.norm();
        let qh = q / n;
        let normalize = (nalgebra::Matrix4::identity() - qh * qh.transpose()) / n;
        let rot = RigidTransform::from_params(p).rotation_matrix();
        Self {
            w: qh[0],
            v: Vector3::new(qh[1], qh[2], qh[3]),
            rot,
            t: Vector3::new(p[4], p[5], p[6]),
            normalize,
        }
    }

    /// Residual (pixels) and its 2x7 Jacobian, or `None` when the point is
    /// dropped.
    fn residual(
        &self,
        obs: &Observation,
        k: &CameraIntrinsics,
        jacobian: bool,
    ) -> Option<(Vector2<f64>, Option<Matrix2x7>)> {
        let x = obs.point.coords;
        let p = self.rot * x + self.t;
        if p.z <= MIN_DEPTH_M {
            return None;
        }
        let inv_z = 1.0 / p.z;
        let r = Vector2::new(
            k.fx * p.x * inv_z + k.cx - obs.target.x,
            k.fy * p.y * inv_z + k.cy - obs.target.y,
        );
        if !jacobian {
            return Some((r, None));
        }
        // Projection Jacobian d(u, v)/dP.
        let jp = nalgebra::Matrix2x3::new(
            k.fx * inv_z,
            0.0,
            -k.fx * p.x * inv_z * inv_z,
            0.0,
            k.fy * inv_z,
            -k.fy * p.y * inv_z * inv_z,
        );
        // For unit q: R X = X + 2w (v × X) + 2 v × (v × X).
        let d_w = 2.0 * self.v.cross(&x);
        let vx = self.v.dot(&x);
        let d_v = -2.0 * self.w * x.cross_matrix()
            + 2.0 * (Matrix3::identity() * vx + self.v * x.transpose() - 2.0 * x * self.v.transpose());
        let mut d_unit = nalgebra::Matrix3x4::zeros();
        d_unit.set_column(0, &d_w);
        d_unit.fixed_view_mut::<3, 3>(0, 1).copy_from(&d_v);
        let d_q = d_unit * self.normalize;
        let mut j = Matrix2x7::zeros();
        j.fixed_view_mut::<2, 4>(0, 0).copy_from(&(jp * d_q));
        j.fixed_view_mut::<2, 3>(0, 4).copy_from(&jp);
        Some((r, Some(j)))
    }

    fn term(&self, obs: &Observation, k: &CameraIntrinsics, penalty: Penalty, grad: bool) -> LossValue {
        let Some((r, j)) = self.residual(obs, k, grad) else {
            return LossValue {
                dropped: 1,
                ..LossValue::zero()
            };
        };
        let d = r.norm();
        let mut out = LossValue {
            loss: penalty.value(d),
            gradient: [0.0; 7],
            used: 1,
            dropped: 0,
        };
        if let Some(j) = j {
            let g = j.transpose() * r * penalty.weight(d);
            out.gradient.copy_from_slice(g.as_slice());
        }
        out
    }

    /// Adds this observation's IRLS-weighted `JᵀJ` to `h`.
    fn accumulate_normal(&self, obs: &Observation, k: &CameraIntrinsics, penalty: Penalty, h: &mut Matrix7) {
        if let Some((r, Some(j))) = self.residual(obs, k, true) {
            let w = penalty.weight(r.norm().max(IRLS_FLOOR_PX));
            *h += j.transpose() * j * w;
        }
    }
}

type Matrix2x7 = nalgebra::SMatrix<f64, 2, 7>;
/// 7x7 parameter-space matrix.
pub type Matrix7 = nalgebra::SMatrix<f64, 7, 7>;

/// Distances below this are treated as this value when forming IRLS weights.
const IRLS_FLOOR_PX: f64 = 1e-6;

impl ReprojectionObjective {
    /// IRLS Gauss-Newton matrix `Σ w_i J_iᵀ J_i` at `params`, with
    /// `w_i = ρ'(d_i) / d_i`.
    pub fn gauss_newton_matrix(&self, params: &[f64; 7]) -> Matrix7 {
        let frame = ParamFrame::new(params);
        let partials: Vec<Matrix7> = self
            .observations
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut h = Matrix7::zeros();
                for obs in chunk {
                    frame.accumulate_normal(obs, &self.k_lq, self.penalty, &mut h);
                }
                h
            })
            .collect();
        partials.iter().fold(Matrix7::zeros(), |a, b| a + b)
    }
}

/// Sum over all correspondences of the pixel distance between the
/// reprojected HQ pixel and its LQ match, with its gradient.
///
/// `hq_depths[i]` is the HQ depth frame of `corr.pairs[i]`.
pub fn correspondence_loss(
    corr: &CorrespondenceSet,
    hq_depths: &[&DepthImage],
    k_hq: &CameraIntrinsics,
    k_lq: &CameraIntrinsics,
    t: &RigidTransform,
) -> Result<LossValue> {
    let objective = ReprojectionObjective::from_correspondences(corr, hq_depths, k_hq, k_lq, Penalty::Distance)?;
    Ok(objective.evaluate(&t.params()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(520.0, 515.0, 319.5, 239.5, 640, 480).unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, penalty: Penalty) -> (ReprojectionObjective, [f64; 7]) {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let truth = RigidTransform::from_axis_angle(
            axis,
            rng.random_range(-0.2..0.2),
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
        );
        let obs = (0..n)
            .map(|_| {
                let point = Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(1.0..4.0),
                );
                let (px, _) = project(&truth.apply(&point), &k()).unwrap();
                let target = Pixel::new(
                    px.x + rng.random_range(-20.0..20.0),
                    px.y + rng.random_range(-20.0..20.0),
                );
                Observation { point, target }
            })
            .collect();
        // Evaluate at a perturbed, non-unit parameter vector.
        let mut p = truth.params();
        for v in p.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let scale = rng.random_range(0.7..1.4);
        for v in p.iter_mut().take(4) {
            *v *= scale;
        }
        (ReprojectionObjective::new(obs, k(), penalty), p)
    }

    /// Central finite differences, independent of the analytic path.
    fn numeric_gradient(obj: &ReprojectionObjective, p: &[f64; 7], h: f64) -> [f64; 7] {
        let mut g = [0.0; 7];
        for i in 0..7 {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            g[i] = (obj.value(&a).loss - obj.value(&b).loss) / (2.0 * h);
        }
        g
    }

    fn max_relative_error(a: &[f64; 7], b: &[f64; 7]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for penalty in [Penalty::Distance, Penalty::Huber { delta: 3.0 }] {
            for _ in 0..25 {
                let (obj, p) = random_problem(&mut rng, 20, penalty);
                let analytic = obj.evaluate(&p).gradient;
                let numeric = numeric_gradient(&obj, &p, 1e-6);
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "{penalty:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn gradient_orthogonal_to_quaternion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (obj, p) = random_problem(&mut rng, 30, Penalty::Distance);
        let g = obj.evaluate(&p).gradient;
        let radial: f64 = (0..4).map(|i| g[i] * p[i]).sum();
        let norm: f64 = (0..4).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
        assert!(radial.abs() < 1e-9 * norm.max(1.0));
    }

    #[test]
    fn zero_at_exact_model() {
        let truth = RigidTransform::from_axis_angle(Vector3::y(), 0.08, Vector3::new(0.08, 0.0, 0.0));
        let obs: Vec<_> = (0..50)
            .map(|i| {
                let point = Point3::new(-1.0 + 0.04 * i as f64, 0.3 - 0.01 * i as f64, 1.5 + 0.05 * i as f64);
                let (target, _) = project(&truth.apply(&point), &k()).unwrap();
                Observation { point, target }
            })
            .collect();
        let obj = ReprojectionObjective::new(obs, k(), Penalty::Distance);
        let v = obj.evaluate(&truth.params());
        assert!(v.loss < 1e-6);
        assert!(obj.value(&RigidTransform::identity().params()).loss > 1.0);
    }

    #[test]
    fn near_zero_depth_terms_dropped() {
        let obs = vec![
            Observation {
                point: Point3::new(0.0, 0.0, 1.0),
                target: Pixel::new(320.0, 240.0),
            },
            Observation {
                point: Point3::new(0.0, 0.0, 5e-5),
                target: Pixel::new(320.0, 240.0),
            },
            Observation {
                point: Point3::new(0.0, 0.0, -1.0),
                target: Pixel::new(320.0, 240.0),
            },
        ];
        let obj = ReprojectionObjective::new(obs, k(), Penalty::Distance);
        let v = obj.evaluate(&RigidTransform::identity().params());
        assert_eq!((v.used, v.dropped), (1, 2));
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (obj, p) = random_problem(&mut rng, 2000, Penalty::Distance);
        let mut shuffled = obj.observations().to_vec();
        shuffled.reverse();
        let other = ReprojectionObjective::new(shuffled, k(), Penalty::Distance);
        let a = obj.evaluate(&p);
        let b = other.evaluate(&p);
        assert!((a.loss - b.loss).abs() <= 1e-9 * a.loss);
    }

    #[test]
    fn evaluate_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (obj, p) = random_problem(&mut rng, 5000, Penalty::Distance);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| obj.evaluate(&p));
        let b = four.install(|| obj.evaluate(&p));
        assert_eq!(a, b);
    }
}
