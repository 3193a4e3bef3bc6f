//! Clock-offset search and nearest-timestamp frame matching.
//!
//! The two devices' clocks are assumed to differ by a constant offset:
//! `t_L = t_H + Δ`. For a candidate `Δ`, every LQ frame is matched to the HQ
//! frame closest in shifted time; the offset that yields the best spatial
//! alignment wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::sequence_io::Sequence;
use crate::spatial_align::{calibrate, CalibrationConfig, CalibrationReport, CorrespondenceProvider};

/// Default half-width of the offset search segment.
pub const DEFAULT_RANGE_MS: f64 = 60.0;
/// Default grid step of the offset search.
pub const DEFAULT_STEP_MS: f64 = 5.0;
/// Default maximum time gap for a frame pair to be used.
pub const DEFAULT_MAX_GAP_MS: f64 = 15.0;

/// HQ -> LQ clock offset in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeShift {
    pub delta_ms: f64,
}

impl TimeShift {
    pub fn new(delta_ms: f64) -> Self {
        Self { delta_ms }
    }

    /// The offset rounded to whole microseconds, used for all comparisons.
    pub fn delta_us(&self) -> i64 {
        (self.delta_ms * 1000.0).round() as i64
    }
}

/// LQ frame `lq_index` matched to HQ frame `hq_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub lq_index: usize,
    pub hq_index: usize,
    /// `|t_L - (t_H + Δ)|` in milliseconds.
    pub gap_ms: f64,
}

/// Per-LQ-frame matches, ordered by LQ index, each LQ index at most once.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMapping {
    pairs: Vec<MatchedPair>,
}

impl FrameMapping {
    pub fn from_pairs(pairs: Vec<MatchedPair>) -> Result<Self> {
        if pairs.windows(2).any(|w| w[0].lq_index >= w[1].lq_index) {
            return Err(Error::invalid("frame mapping must be strictly ordered by LQ index"));
        }
        if pairs.iter().any(|p| !(p.gap_ms >= 0.0)) {
            return Err(Error::invalid("frame mapping gaps must be non-negative"));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[MatchedPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs whose gap does not exceed `max_gap_ms`.
    pub fn within(&self, max_gap_ms: f64) -> FrameMapping {
        FrameMapping {
            pairs: self.pairs.iter().copied().filter(|p| p.gap_ms <= max_gap_ms).collect(),
        }
    }
}

fn gap_us(t_lq: u64, t_hq: u64, delta_us: i64) -> u64 {
    (t_lq as i128 - t_hq as i128 - delta_us as i128).unsigned_abs() as u64
}

/// Matches sorted timestamp lists: for every LQ timestamp, the HQ index
/// minimizing `|t_L - (t_H + Δ)|`, ties toward the smaller HQ index.
///
/// Both lists must be strictly increasing. Runs in `O(N_L + N_H)`.
pub fn match_timestamps(lq_us: &[u64], hq_us: &[u64], shift: TimeShift) -> FrameMapping {
    if hq_us.is_empty() {
        return FrameMapping::default();
    }
    let delta = shift.delta_us();
    let mut j = 0;
    let pairs = lq_us
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            // Distance along j is unimodal, so the first local minimum is the
            // smallest-index global minimum; it never moves backwards as t grows.
            while j + 1 < hq_us.len() && gap_us(t, hq_us[j + 1], delta) < gap_us(t, hq_us[j], delta) {
                j += 1;
            }
            MatchedPair {
                lq_index: i,
                hq_index: j,
                gap_ms: gap_us(t, hq_us[j], delta) as f64 / 1000.0,
            }
        })
        .collect();
    FrameMapping { pairs }
}

/// Matches every LQ frame to its nearest HQ frame in shifted time.
pub fn match_frames(lq: &Sequence, hq: &Sequence, shift: TimeShift) -> FrameMapping {
    match_timestamps(&lq.timestamps_us(), &hq.timestamps_us(), shift)
}

/// Grid of candidate offsets `{-range, -range + step, ..., +range}`.
pub fn candidate_shifts(range_ms: f64, step_ms: f64) -> Result<Vec<f64>> {
    if !(range_ms > 0.0 && step_ms > 0.0 && step_ms <= range_ms) {
        return Err(Error::invalid(format!(
            "shift search needs 0 < step <= range, got range {range_ms} ms, step {step_ms} ms"
        )));
    }
    let n = (2.0 * range_ms / step_ms + 1e-9).floor() as i64;
    Ok((0..=n).map(|i| -range_ms + i as f64 * step_ms).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSearchConfig {
    pub range_ms: f64,
    pub step_ms: f64,
    pub max_gap_ms: f64,
    /// After the grid pass, also try the best offset ± step/2.
    pub coarse_to_fine: bool,
    pub calibration: CalibrationConfig,
}

impl Default for ShiftSearchConfig {
    fn default() -> Self {
        Self {
            range_ms: DEFAULT_RANGE_MS,
            step_ms: DEFAULT_STEP_MS,
            max_gap_ms: DEFAULT_MAX_GAP_MS,
            coarse_to_fine: false,
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Outcome of calibrating at one candidate offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub delta_ms: f64,
    /// Pairs within the gap threshold.
    pub retained_pairs: usize,
    /// Mean pixel residual, absent when the candidate was ineligible.
    pub residual_px: Option<f64>,
    pub correspondences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ShiftSearchResult {
    pub shift: TimeShift,
    pub transform: RigidTransform,
    /// Mapping at the chosen offset, restricted to the gap threshold.
    pub mapping: FrameMapping,
    pub residual_px: f64,
    pub report: CalibrationReport,
    /// Every evaluated candidate, grid order first, then refinements.
    pub candidates: Vec<CandidateEvaluation>,
}

type Evaluated = (CandidateEvaluation, Option<(FrameMapping, CalibrationReport)>);

fn evaluate_candidate(
    lq: &Sequence,
    hq: &Sequence,
    provider: &dyn CorrespondenceProvider,
    cfg: &ShiftSearchConfig,
    delta_ms: f64,
) -> Result<Evaluated> {
    let mapping = match_frames(lq, hq, TimeShift::new(delta_ms)).within(cfg.max_gap_ms);
    let mut eval = CandidateEvaluation {
        delta_ms,
        retained_pairs: mapping.len(),
        residual_px: None,
        correspondences: 0,
        error: None,
    };
    if mapping.is_empty() {
        eval.error = Some("no frame pairs within the gap threshold".into());
        return Ok((eval, None));
    }
    match calibrate(lq, hq, &mapping, provider, &cfg.calibration) {
        Ok(report) => {
            eval.residual_px = Some(report.residual_px);
            eval.correspondences = report.correspondences;
            Ok((eval, Some((mapping, report))))
        }
        Err(e @ (Error::AlignmentInfeasible(_) | Error::Divergence(_))) => {
            eval.error = Some(e.to_string());
            Ok((eval, None))
        }
        Err(e) => Err(e),
    }
}

/// Orders candidates by residual, then smaller |Δ|, then negative Δ first.
fn better(a: &CandidateEvaluation, b: &CandidateEvaluation) -> bool {
    let (Some(ra), Some(rb)) = (a.residual_px, b.residual_px) else {
        return a.residual_px.is_some();
    };
    (ra, a.delta_ms.abs(), a.delta_ms) < (rb, b.delta_ms.abs(), b.delta_ms)
}

fn best_index(evaluated: &[Evaluated]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (e, _)) in evaluated.iter().enumerate() {
        if e.residual_px.is_none() {
            continue;
        }
        if best.is_none_or(|b| better(e, &evaluated[b].0)) {
            best = Some(i);
        }
    }
    best
}

/// Searches the offset grid, calibrating the extrinsic at every candidate and
/// keeping the one with the lowest mean correspondence residual.
pub fn find_time_shift(
    lq: &Sequence,
    hq: &Sequence,
    provider: &dyn CorrespondenceProvider,
    cfg: &ShiftSearchConfig,
) -> Result<ShiftSearchResult> {
    let grid = candidate_shifts(cfg.range_ms, cfg.step_ms)?;
    let mut evaluated = grid
        .par_iter()
        .map(|&d| evaluate_candidate(lq, hq, provider, cfg, d))
        .collect::<Result<Vec<_>>>()?;

    if cfg.coarse_to_fine {
        if let Some(b) = best_index(&evaluated) {
            let center = evaluated[b].0.delta_ms;
            let half = cfg.step_ms / 2.0;
            let refine: Vec<f64> = [center - half, center + half]
                .into_iter()
                .filter(|d| d.abs() <= cfg.range_ms)
                .collect();
            let extra = refine
                .par_iter()
                .map(|&d| evaluate_candidate(lq, hq, provider, cfg, d))
                .collect::<Result<Vec<_>>>()?;
            evaluated.extend(extra);
        }
    }

    for (e, _) in &evaluated {
        match e.residual_px {
            Some(r) => log::info!(
                "shift {:+.1} ms: {} pairs, {} correspondences, residual {r:.4} px",
                e.delta_ms,
                e.retained_pairs,
                e.correspondences
            ),
            None => log::info!(
                "shift {:+.1} ms: ineligible ({})",
                e.delta_ms,
                e.error.as_deref().unwrap_or("unknown")
            ),
        }
    }

    let Some(b) = best_index(&evaluated) else {
        return Err(Error::AlignmentInfeasible(format!(
            "no candidate shift in [-{0}, {0}] ms produced enough correspondences",
            cfg.range_ms
        )));
    };
    let candidates: Vec<CandidateEvaluation> = evaluated.iter().map(|(e, _)| e.clone()).collect();
    let (eval, payload) = evaluated.swap_remove(b);
    let (mapping, report) = payload.expect("eligible candidate carries its calibration");
    Ok(ShiftSearchResult {
        shift: TimeShift::new(eval.delta_ms),
        transform: report.transform,
        mapping,
        residual_px: report.residual_px,
        report,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive argmin over all HQ indices, smallest index on ties.
    fn brute_force(lq: &[u64], hq: &[u64], shift: TimeShift) -> Vec<(usize, u64)> {
        let d = shift.delta_us();
        lq.iter()
            .map(|&t| {
                let mut best = (0, u64::MAX);
                for (j, &h) in hq.iter().enumerate() {
                    let g = (t as i128 - h as i128 - d as i128).unsigned_abs() as u64;
                    if g < best.1 {
                        best = (j, g);
                    }
                }
                best
            })
            .collect()
    }

    fn jittered(rng: &mut ChaCha8Rng, start: u64, n: usize, period: u64, jitter: u64) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::with_capacity(n);
        for i in 0..n {
            let t = start + i as u64 * period + rng.random_range(0..=2 * jitter) - jitter.min(start);
            let t = match out.last() {
                Some(&p) if t <= p => p + 1,
                _ => t,
            };
            out.push(t);
        }
        out
    }

    #[test]
    fn identical_timestamps_map_to_themselves() {
        let ts: Vec<u64> = (0..10).map(|i| 1000 + i * 33_333).collect();
        let m = match_timestamps(&ts, &ts, TimeShift::new(0.0));
        for (i, p) in m.pairs().iter().enumerate() {
            assert_eq!((p.lq_index, p.hq_index, p.gap_ms), (i, i, 0.0));
        }
    }

    #[test]
    fn hand_checked_example() {
        let lq = [0, 100_000, 200_000];
        let hq = [95_000, 105_000];
        let m = match_timestamps(&lq, &hq, TimeShift::new(0.0));
        let got: Vec<_> = m.pairs().iter().map(|p| (p.hq_index, p.gap_ms)).collect();
        assert_eq!(got, vec![(0, 95.0), (0, 5.0), (1, 95.0)]);
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let m = match_timestamps(&[100], &[90, 110], TimeShift::new(0.0));
        assert_eq!(m.pairs()[0].hq_index, 0);
        let m = match_timestamps(&[100, 110], &[90, 110, 130], TimeShift::new(0.0));
        assert_eq!(m.pairs()[0].hq_index, 0);
        assert_eq!(m.pairs()[1].hq_index, 1);
    }

    #[test]
    fn sweep_matches_brute_force_on_random_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n_lq = rng.random_range(1..200);
            let lq = jittered(&mut rng, 1_000_000, n_lq, 33_333, 2_000);
            let (start, n_hq, period) = (
                rng.random_range(900_000..1_100_000),
                rng.random_range(1..200),
                rng.random_range(20_000..50_000),
            );
            let hq = jittered(&mut rng, start, n_hq, period, 3_000);
            let shift = TimeShift::new(rng.random_range(-60.0..60.0));
            let m = match_timestamps(&lq, &hq, shift);
            let oracle = brute_force(&lq, &hq, shift);
            assert_eq!(m.len(), lq.len());
            for (p, (j, g)) in m.pairs().iter().zip(oracle) {
                assert_eq!(p.hq_index, j);
                assert_eq!(p.gap_ms, g as f64 / 1000.0);
            }
        }
    }

    #[test]
    fn default_grid_has_25_candidates() {
        let g = candidate_shifts(DEFAULT_RANGE_MS, DEFAULT_STEP_MS).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], -60.0);
        assert_eq!(g[12], 0.0);
        assert_eq!(g[24], 60.0);
        assert!(candidate_shifts(0.0, 5.0).is_err());
        assert!(candidate_shifts(5.0, 0.0).is_err());
        assert!(candidate_shifts(5.0, 6.0).is_err());
    }

    #[test]
    fn within_filters_by_gap() {
        let m = match_timestamps(&[0, 100_000, 200_000], &[95_000, 105_000], TimeShift::new(0.0));
        assert_eq!(m.within(15.0).len(), 1);
        assert_eq!(m.within(95.0).len(), 3);
        assert!(m.within(5.0).len() <= m.within(15.0).len());
    }

    proptest! {
        #[test]
        fn shift_equivariance(seed in 0u64..500, c in 0u64..100_000, delta in -60.0f64..60.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lq = jittered(&mut rng, 1_000_000, 50, 33_333, 2_000);
            let hq = jittered(&mut rng, 1_000_000, 60, 28_000, 2_000);
            let shifted: Vec<u64> = hq.iter().map(|t| t - c.min(900_000)).collect();
            let c = c.min(900_000);
            let a = match_timestamps(&lq, &hq, TimeShift::new(delta));
            let delta_b = TimeShift::new(delta).delta_us() as f64 / 1000.0 + c as f64 / 1000.0;
            let b = match_timestamps(&lq, &shifted, TimeShift::new(delta_b));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gaps_bounded_by_half_interval(seed in 0u64..500, delta in -60.0f64..60.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lq = jittered(&mut rng, 1_000_000, 80, 33_333, 3_000);
            let hq = jittered(&mut rng, 1_000_000, 80, 33_333, 3_000);
            let m = match_timestamps(&lq, &hq, TimeShift::new(delta));
            let max_interval = hq.windows(2).map(|w| w[1] - w[0]).max().unwrap() as f64 / 1000.0;
            let d = TimeShift::new(delta).delta_us();
            let lo = hq[0] as i64 + d;
            let hi = *hq.last().unwrap() as i64 + d;
            for p in m.pairs() {
                let t = lq[p.lq_index] as i64;
                if t >= lo && t <= hi {
                    prop_assert!(p.gap_ms <= max_interval / 2.0 + 1e-9);
                }
            }
        }
    }
}
