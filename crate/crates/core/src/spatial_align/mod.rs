//! Extrinsic (HQ -> LQ) estimation from 2D correspondences.
//!
//! Each outer pass reprojects the matched HQ color frames into the LQ view
//! under the current transform, asks a [`CorrespondenceProvider`] for fresh
//! matches between the LQ color image and the reprojected HQ image, and then
//! minimizes the summed image-plane distance with a line-searched descent.

pub mod classic;
pub mod loss;
pub mod optimize;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reproject, CameraIntrinsics, Pixel, Reprojection, RigidTransform};
use crate::sequence_io::{Frame, Sequence};
use crate::temporal_align::FrameMapping;

pub use classic::ClassicProvider;
pub use loss::{correspondence_loss, LossValue, Observation, Penalty, ReprojectionObjective, MIN_DEPTH_M};
pub use optimize::{gradient_descent, DescentConfig, DescentResult, Direction};

/// An LQ pixel matched to an HQ pixel that carries valid HQ depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub lq: Pixel,
    pub hq: (u32, u32),
}

/// Matches extracted from one `(i, Φ(i))` frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrespondences {
    pub lq_index: usize,
    pub hq_index: usize,
    pub matches: Vec<Correspondence>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<PairCorrespondences>,
}

impl CorrespondenceSet {
    pub fn total(&self) -> usize {
        self.pairs.iter().map(|p| p.matches.len()).sum()
    }
}

/// Everything a provider may look at for one frame pair.
#[derive(Debug, Clone, Copy)]
pub struct PairView<'a> {
    pub lq_index: usize,
    pub hq_index: usize,
    pub lq: &'a Frame,
    pub hq: &'a Frame,
    pub k_lq: &'a CameraIntrinsics,
    pub k_hq: &'a CameraIntrinsics,
    /// Current HQ -> LQ estimate.
    pub transform: &'a RigidTransform,
    /// The HQ frame reprojected into the LQ camera under `transform`. Present
    /// whenever the provider asks for it.
    pub reprojected: Option<&'a Reprojection>,
}

/// Supplies 2D matches between an LQ color frame and the reprojected HQ
/// color frame. Returned HQ pixels must carry valid HQ depth.
pub trait CorrespondenceProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`PairView::reprojected`] must be filled in.
    fn needs_reprojection(&self) -> bool {
        true
    }

    fn correspondences(&self, view: &PairView<'_>) -> Result<Vec<Correspondence>>;
}

/// Calibration schedule. Defaults: 10 passes, at most 200 descent steps per
/// pass, 50 correspondences minimum, no robust weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub passes: usize,
    pub descent: DescentConfig,
    /// Huber threshold in pixels; `None` uses the plain distance.
    pub huber_px: Option<f64>,
    pub min_correspondences: usize,
    /// A pass whose loss exceeds this multiple of the first pass's initial loss
    /// is reported as divergence.
    pub divergence_factor: f64,
    /// Use every n-th matched frame pair.
    pub pair_stride: usize,
    pub initial: RigidTransform,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            passes: 10,
            descent: DescentConfig::default(),
            huber_px: None,
            min_correspondences: 50,
            divergence_factor: 10.0,
            pair_stride: 1,
            initial: RigidTransform::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub transform: RigidTransform,
    /// Mean objective per descent step, one list per outer pass.
    pub loss_trace: Vec<Vec<f64>>,
    pub correspondence_counts: Vec<usize>,
    pub converged: bool,
    /// Mean plain pixel distance over the final pass's correspondences.
    pub residual_px: f64,
    /// Correspondences used for `residual_px`.
    pub correspondences: usize,
    /// Terms dropped by the near-zero-depth guard at the final transform.
    pub dropped: usize,
}

fn pair_views(lq: &Sequence, hq: &Sequence, mapping: &FrameMapping, stride: usize) -> Result<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = mapping
        .pairs()
        .iter()
        .step_by(stride.max(1))
        .map(|p| (p.lq_index, p.hq_index))
        .collect();
    for &(i, j) in &pairs {
        if i >= lq.len() || j >= hq.len() {
            return Err(Error::invalid(format!(
                "mapping pair ({i}, {j}) out of range for sequences of length {} and {}",
                lq.len(),
                hq.len()
            )));
        }
    }
    Ok(pairs)
}

/// Queries the provider for every frame pair under transform `t`.
pub fn collect_correspondences(
    lq: &Sequence,
    hq: &Sequence,
    pairs: &[(usize, usize)],
    provider: &dyn CorrespondenceProvider,
    t: &RigidTransform,
) -> Result<CorrespondenceSet> {
    let per_pair: Vec<Result<PairCorrespondences>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let lq_frame = &lq.frames()[i];
            let hq_frame = &hq.frames()[j];
            let reprojected = if provider.needs_reprojection() {
                Some(reproject(
                    &hq_frame.depth,
                    Some(&hq_frame.color),
                    &hq.intrinsics,
                    &lq.intrinsics,
                    t,
                )?)
            } else {
                None
            };
            let view = PairView {
                lq_index: i,
                hq_index: j,
                lq: lq_frame,
                hq: hq_frame,
                k_lq: &lq.intrinsics,
                k_hq: &hq.intrinsics,
                transform: t,
                reprojected: reprojected.as_ref(),
            };
            let matches = provider.correspondences(&view)?;
            for m in &matches {
                let (u, v) = m.hq;
                if u >= hq.intrinsics.width
                    || v >= hq.intrinsics.height
                    || !hq_frame.depth.is_valid(u, v)
                    || !lq.intrinsics.contains(&m.lq)
                {
                    return Err(Error::invalid(format!(
                        "provider `{}` returned an invalid correspondence for pair ({i}, {j})",
                        provider.name()
                    )));
                }
            }
            Ok(PairCorrespondences {
                lq_index: i,
                hq_index: j,
                matches,
            })
        })
        .collect();
    let pairs = per_pair.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CorrespondenceSet { pairs })
}

fn param_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let (pa, mut pb) = (a.params(), b.params());
    let dot: f64 = (0..4).map(|i| pa[i] * pb[i]).sum();
    if dot < 0.0 {
        for v in pb.iter_mut().take(4) {
            *v = -*v;
        }
    }
    pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Estimates the HQ -> LQ transform for matched frame pairs, alternating
/// correspondence extraction and descent.
pub fn calibrate(
    lq: &Sequence,
    hq: &Sequence,
    mapping: &FrameMapping,
    provider: &dyn CorrespondenceProvider,
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    if mapping.is_empty() {
        return Err(Error::invalid("frame mapping is empty"));
    }
    if cfg.passes == 0 {
        return Err(Error::invalid("at least one calibration pass is required"));
    }
    let pairs = pair_views(lq, hq, mapping, cfg.pair_stride)?;
    let penalty = Penalty::from_huber(cfg.huber_px);

    let mut t = cfg.initial;
    let mut loss_trace = Vec::with_capacity(cfg.passes);
    let mut counts = Vec::with_capacity(cfg.passes);
    let mut reference: Option<f64> = None;
    let mut converged = false;
    let mut last_objective = None;

    for pass in 0..cfg.passes {
        let corr = collect_correspondences(lq, hq, &pairs, provider, &t)?;
        let total = corr.total();
        counts.push(total);
        if total < cfg.min_correspondences {
            return Err(Error::AlignmentInfeasible(format!(
                "pass {pass}: {total} correspondences, at least {} required",
                cfg.min_correspondences
            )));
        }
        let depths: Vec<_> = corr.pairs.iter().map(|p| &hq.frames()[p.hq_index].depth).collect();
        let obj = ReprojectionObjective::from_correspondences(&corr, &depths, &hq.intrinsics, &lq.intrinsics, penalty)?;
        let result = gradient_descent(&obj, t.params(), &cfg.descent);
        let start = result.trace[0];
        let end = *result.trace.last().expect("trace starts with the initial value");
        let reference = *reference.get_or_insert(start);
        if !end.is_finite() || end > cfg.divergence_factor * reference.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence(format!(
                "pass {pass}: loss {end} exceeds {} x initial loss {reference}",
                cfg.divergence_factor
            )));
        }
        let next = RigidTransform::from_params(&result.params);
        let update = param_distance(&t, &next);
        log::debug!(
            "calibration pass {pass}: {total} correspondences, loss {start:.4} -> {end:.4}, {} steps",
            result.steps
        );
        loss_trace.push(result.trace);
        t = next;
        last_objective = Some(obj);
        if update < cfg.descent.tolerance {
            converged = true;
            break;
        }
    }

    let obj = last_objective
        .expect("at least one pass ran")
        .with_penalty(Penalty::Distance);
    let plain = obj.value(&t.params());
    Ok(CalibrationReport {
        transform: t,
        loss_trace,
        correspondence_counts: counts,
        converged,
        residual_px: plain.loss / plain.used.max(1) as f64,
        correspondences: plain.used,
        dropped: plain.dropped,
    })
}
