//! Paired-dataset construction: every retained LQ frame gets the matched HQ
//! frame reprojected into its camera as ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reproject_depth, RigidTransform};
use crate::sequence_io::{PairedDataset, PairedRecord, Sequence};
use crate::temporal_align::{FrameMapping, ShiftSearchResult, TimeShift};

/// Clock offset, extrinsic and frame mapping estimated for one sequence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub shift: TimeShift,
    /// HQ -> LQ.
    pub transform: RigidTransform,
    pub mapping: FrameMapping,
    /// Mean pixel error of the final correspondences.
    pub residual_px: f64,
}

impl AlignmentResult {
    /// Checks that every mapped index exists in both sequences.
    pub fn validate_for(&self, lq: &Sequence, hq: &Sequence) -> Result<()> {
        if !(self.residual_px >= 0.0) {
            return Err(Error::invalid(format!("residual {} is negative", self.residual_px)));
        }
        for p in self.mapping.pairs() {
            if p.lq_index >= lq.len() || p.hq_index >= hq.len() {
                return Err(Error::invalid(format!(
                    "alignment maps LQ frame {} to HQ frame {}, but the sequences have {} and {} frames",
                    p.lq_index,
                    p.hq_index,
                    lq.len(),
                    hq.len()
                )));
            }
        }
        Ok(())
    }
}

impl From<&ShiftSearchResult> for AlignmentResult {
    fn from(r: &ShiftSearchResult) -> Self {
        Self {
            shift: r.shift,
            transform: r.transform,
            mapping: r.mapping.clone(),
            residual_px: r.residual_px,
        }
    }
}

/// Reprojects the matched HQ frame of every mapped pair with gap at most
/// `max_gap_ms` into the LQ camera. Records are ordered by LQ index; one HQ
/// frame may serve several LQ frames.
pub fn build_paired_dataset(
    lq: &Sequence,
    hq: &Sequence,
    a: &AlignmentResult,
    max_gap_ms: f64,
) -> Result<PairedDataset> {
    a.validate_for(lq, hq)?;
    let mut dataset = PairedDataset::new(lq.intrinsics, a.shift.delta_ms, a.transform, max_gap_ms)?;
    let records = a
        .mapping
        .pairs()
        .par_iter()
        .filter(|p| p.gap_ms <= max_gap_ms)
        .map(|p| {
            let h = &hq.frames()[p.hq_index];
            let (gt_depth, gt_color) =
                reproject_depth(&h.depth, &h.color, &hq.intrinsics, &lq.intrinsics, &a.transform)?;
            Ok(PairedRecord {
                lq_index: p.lq_index,
                hq_index: p.hq_index,
                lq: lq.frames()[p.lq_index].clone(),
                gt_depth,
                gt_color,
                gap_ms: p.gap_ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in records {
        dataset.push(r)?;
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, DepthImage};
    use crate::sequence_io::{Frame, Sensor};
    use crate::temporal_align::match_frames;
    use image::RgbImage;

    fn seq(sensor: Sensor, k: CameraIntrinsics, times: &[u64], depth: f64) -> Sequence {
        let frames = times
            .iter()
            .map(|&t| {
                let d = DepthImage::from_fn(k.width, k.height, |_, _| depth).unwrap();
                Frame::new(RgbImage::new(k.width, k.height), d, t)
            })
            .collect();
        Sequence::new("s", sensor, k, frames).unwrap()
    }

    fn alignment(lq: &Sequence, hq: &Sequence) -> AlignmentResult {
        AlignmentResult {
            shift: TimeShift::new(0.0),
            transform: RigidTransform::identity(),
            mapping: match_frames(lq, hq, TimeShift::new(0.0)),
            residual_px: 0.0,
        }
    }

    #[test]
    fn identity_alignment_reproduces_hq_depth() {
        let k = CameraIntrinsics::centered(50.0, 32, 24).unwrap();
        let lq = seq(Sensor::Lq, k, &[0, 33_000, 66_000], 1.5);
        let hq = seq(Sensor::Hq, k, &[1_000, 34_000, 67_000], 1.5);
        let d = build_paired_dataset(&lq, &hq, &alignment(&lq, &hq), 15.0).unwrap();
        assert_eq!(d.len(), 3);
        for (i, r) in d.records().iter().enumerate() {
            assert_eq!((r.lq_index, r.hq_index), (i, i));
            assert_eq!(r.gt_depth, hq.frames()[i].depth);
            assert_eq!(r.valid_mask(), r.gt_depth.valid_mask());
        }
    }

    #[test]
    fn zero_gap_threshold_on_jittered_streams_is_empty() {
        let k = CameraIntrinsics::centered(50.0, 16, 12).unwrap();
        let lq = seq(Sensor::Lq, k, &[0, 33_100, 66_900], 1.0);
        let hq = seq(Sensor::Hq, k, &[500, 33_800, 66_000], 1.0);
        let a = alignment(&lq, &hq);
        assert!(build_paired_dataset(&lq, &hq, &a, 0.0).unwrap().is_empty());
        let d = build_paired_dataset(&lq, &hq, &a, 15.0).unwrap();
        assert!(d.records().iter().all(|r| r.gap_ms <= 15.0));
        assert!(d.len() <= lq.len());
    }

    #[test]
    fn duplicated_hq_frames_are_allowed() {
        let k = CameraIntrinsics::centered(50.0, 16, 12).unwrap();
        let lq = seq(Sensor::Lq, k, &[0, 10_000, 20_000], 1.0);
        let hq = seq(Sensor::Hq, k, &[10_000], 1.0);
        let d = build_paired_dataset(&lq, &hq, &alignment(&lq, &hq), 15.0).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.records().iter().all(|r| r.hq_index == 0));
    }

    #[test]
    fn lower_hq_resolution_gives_sparse_ground_truth() {
        let k_lq = CameraIntrinsics::centered(80.0, 64, 48).unwrap();
        let k_hq = CameraIntrinsics::centered(40.0, 32, 24).unwrap();
        let lq = seq(Sensor::Lq, k_lq, &[0], 2.0);
        let hq = seq(Sensor::Hq, k_hq, &[0], 2.0);
        let d = build_paired_dataset(&lq, &hq, &alignment(&lq, &hq), 15.0).unwrap();
        let valid = d.records()[0].gt_depth.valid_count();
        assert!(valid > 0 && valid < k_lq.pixel_count());
    }

    #[test]
    fn out_of_range_mapping_is_rejected() {
        let k = CameraIntrinsics::centered(50.0, 16, 12).unwrap();
        let lq = seq(Sensor::Lq, k, &[0, 10_000], 1.0);
        let hq = seq(Sensor::Hq, k, &[0, 10_000], 1.0);
        let a = alignment(&lq, &hq);
        let short = seq(Sensor::Hq, k, &[0], 1.0);
        assert!(build_paired_dataset(&lq, &short, &a, 15.0).unwrap_err().is_validation());
    }
}
