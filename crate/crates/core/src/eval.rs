//! Masked depth losses and metrics.
//!
//! A pixel counts when both the ground-truth validity mask and the
//! segmentation mask are set. A missing prediction (zero) is scored as a
//! prediction of 0 m.

use image::{GrayImage, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, Mask};
use crate::sequence_io::PairedDataset;

/// How per-pixel errors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of masked pixels.
    #[default]
    Mean,
    /// Plain sum over masked pixels.
    Sum,
}

fn check_dims(pred: &DepthImage, gt: &DepthImage, m: &Mask, m_seg: &Mask) -> Result<()> {
    let dims = gt.dimensions();
    if pred.dimensions() != dims || m.dimensions() != dims || m_seg.dimensions() != dims {
        return Err(Error::invalid(format!(
            "dimension mismatch: pred {:?}, gt {:?}, mask {:?}, segmentation {:?}",
            pred.dimensions(),
            dims,
            m.dimensions(),
            m_seg.dimensions()
        )));
    }
    Ok(())
}

/// Masked absolute differences in meters, summed in pixel order.
fn masked_sum(pred: &DepthImage, gt: &DepthImage, m: &Mask, m_seg: &Mask, f: impl Fn(f64) -> f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (p, g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if m.bits()[i] && m_seg.bits()[i] {
            sum += f(p - g);
            n += 1;
        }
    }
    (sum, n)
}

/// L1 depth error over `m ∧ m_seg`, in meters, as a per-pixel mean.
/// An empty joint mask yields 0 and a warning.
pub fn masked_l1(pred: &DepthImage, gt: &DepthImage, m: &Mask, m_seg: &Mask) -> Result<f64> {
    masked_l1_with(pred, gt, m, m_seg, Reduction::Mean)
}

pub fn masked_l1_with(pred: &DepthImage, gt: &DepthImage, m: &Mask, m_seg: &Mask, reduction: Reduction) -> Result<f64> {
    check_dims(pred, gt, m, m_seg)?;
    let (sum, n) = masked_sum(pred, gt, m, m_seg, f64::abs);
    if n == 0 {
        log::warn!("masked L1 over an empty mask; reporting 0");
        return Ok(0.0);
    }
    Ok(match reduction {
        Reduction::Mean => sum / n as f64,
        Reduction::Sum => sum,
    })
}

/// Mean squared error over the joint mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mse {
    /// Mean squared error in mm².
    pub mse_mm2: f64,
    /// Square root of `mse_mm2`, in mm.
    pub rmse_mm: f64,
    /// Pixels in the joint mask.
    pub pixels: usize,
}

/// Squared depth error in mm² averaged over `m ∧ m_seg`. An empty joint mask
/// yields zeros and a warning.
pub fn masked_mse(pred: &DepthImage, gt: &DepthImage, m: &Mask, m_seg: &Mask) -> Result<Mse> {
    check_dims(pred, gt, m, m_seg)?;
    let (sum, n) = masked_sum(pred, gt, m, m_seg, |e| (e * 1000.0) * (e * 1000.0));
    if n == 0 {
        log::warn!("masked MSE over an empty mask; reporting 0");
        return Ok(Mse {
            mse_mm2: 0.0,
            rmse_mm: 0.0,
            pixels: 0,
        });
    }
    let mse = sum / n as f64;
    Ok(Mse {
        mse_mm2: mse,
        rmse_mm: mse.sqrt(),
        pixels: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub lq_index: usize,
    pub pixels: usize,
    pub l1_mm: f64,
    pub mse_mm2: f64,
    pub rmse_mm: f64,
}

/// Per-frame metrics and their means over frames with a non-empty joint mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub frames: Vec<FrameMetrics>,
    pub evaluated_frames: usize,
    pub skipped_frames: usize,
    pub mean_l1_mm: f64,
    pub mean_mse_mm2: f64,
    pub mean_rmse_mm: f64,
}

/// Scores one prediction per record against the record's ground truth, using
/// the ground-truth validity mask and the LQ frame's segmentation mask.
pub fn evaluate_dataset(dataset: &PairedDataset, predictions: &[DepthImage]) -> Result<DatasetMetrics> {
    if predictions.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} records",
            predictions.len(),
            dataset.len()
        )));
    }
    let frames = dataset
        .records()
        .par_iter()
        .zip(predictions)
        .map(|(r, pred)| {
            let (m, seg) = (r.valid_mask(), r.lq.segmentation());
            let mse = masked_mse(pred, &r.gt_depth, &m, &seg)?;
            Ok(FrameMetrics {
                lq_index: r.lq_index,
                pixels: mse.pixels,
                l1_mm: masked_l1(pred, &r.gt_depth, &m, &seg)? * 1000.0,
                mse_mm2: mse.mse_mm2,
                rmse_mm: mse.rmse_mm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<&FrameMetrics> = frames.iter().filter(|f| f.pixels > 0).collect();
    let mean = |f: fn(&FrameMetrics) -> f64| {
        if used.is_empty() {
            0.0
        } else {
            used.iter().map(|m| f(m)).sum::<f64>() / used.len() as f64
        }
    };
    Ok(DatasetMetrics {
        evaluated_frames: used.len(),
        skipped_frames: frames.len() - used.len(),
        mean_l1_mm: mean(|m| m.l1_mm),
        mean_mse_mm2: mean(|m| m.mse_mm2),
        mean_rmse_mm: mean(|m| m.rmse_mm),
        frames,
    })
}

/// Absolute error image: `|pred - gt|` in mm mapped linearly so that
/// `full_scale_mm` is white; pixels outside the joint mask are black.
pub fn error_heatmap(
    pred: &DepthImage,
    gt: &DepthImage,
    m: &Mask,
    m_seg: &Mask,
    full_scale_mm: f64,
) -> Result<GrayImage> {
    check_dims(pred, gt, m, m_seg)?;
    if !(full_scale_mm > 0.0) {
        return Err(Error::invalid("heatmap full scale must be positive"));
    }
    let (w, h) = gt.dimensions();
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        if !(m.bits()[i] && m_seg.bits()[i]) {
            return Luma([0]);
        }
        let e = (pred.values()[i] - gt.values()[i]).abs() * 1000.0;
        Luma([(e / full_scale_mm * 255.0).round().min(255.0) as u8])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use crate::sequence_io::{Frame, PairedRecord};
    use image::RgbImage;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, w: u32, h: u32) -> (DepthImage, DepthImage, Mask, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |p: f64| {
            DepthImage::from_fn(w, h, |_, _| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    rng.random_range(0.5..4.0)
                }
            })
            .unwrap()
        };
        let pred = gen(0.05);
        let gt = gen(0.3);
        let m = gt.valid_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let seg = Mask::from_bits(w, h, (0..w * h).map(|_| rng.random::<f64>() < 0.6).collect()).unwrap();
        (pred, gt, m, seg)
    }

    fn naive(pred: &DepthImage, gt: &DepthImage, m: &Mask, s: &Mask, sq: bool) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if m.get(x, y) && s.get(x, y) {
                    let e = (pred.get(x, y) - gt.get(x, y)) * if sq { 1000.0 } else { 1.0 };
                    sum += if sq { e * e } else { e.abs() };
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    #[test]
    fn identical_images_score_zero() {
        let (_, gt, m, s) = random_pair(0, 16, 12);
        assert_eq!(masked_l1(&gt, &gt, &m, &s).unwrap(), 0.0);
        assert_eq!(masked_mse(&gt, &gt, &m, &s).unwrap().mse_mm2, 0.0);
    }

    #[test]
    fn constant_offset() {
        let gt = DepthImage::from_fn(8, 8, |_, _| 2.0).unwrap();
        let pred = DepthImage::from_fn(8, 8, |_, _| 2.01).unwrap();
        let all = Mask::new(8, 8, true);
        assert!((masked_l1(&pred, &gt, &all, &all).unwrap() - 0.01).abs() < 1e-12);
        let sum = masked_l1_with(&pred, &gt, &all, &all, Reduction::Sum).unwrap();
        assert!((sum - 0.64).abs() < 1e-9);
        let mse = masked_mse(&pred, &gt, &all, &all).unwrap();
        assert!((mse.mse_mm2 - 100.0).abs() < 1e-6 && (mse.rmse_mm - 10.0).abs() < 1e-7);
    }

    #[test]
    fn half_offset_matches_oracle_exactly() {
        let gt = DepthImage::from_fn(10, 10, |_, _| 1.5).unwrap();
        let pred = DepthImage::from_fn(10, 10, |x, _| if x < 5 { 1.505 } else { 1.5 }).unwrap();
        let all = Mask::new(10, 10, true);
        assert_eq!(
            masked_mse(&pred, &gt, &all, &all).unwrap().mse_mm2,
            naive(&pred, &gt, &all, &all, true)
        );
    }

    #[test]
    fn random_pairs_match_naive_loops() {
        for seed in 0..20 {
            let (pred, gt, m, s) = random_pair(seed, 23, 17);
            assert!((masked_l1(&pred, &gt, &m, &s).unwrap() - naive(&pred, &gt, &m, &s, false)).abs() < 1e-9);
            assert!((masked_mse(&pred, &gt, &m, &s).unwrap().mse_mm2 - naive(&pred, &gt, &m, &s, true)).abs() < 1e-9);
        }
    }

    #[test]
    fn pixels_outside_masks_contribute_nothing() {
        let (pred, gt, m, s) = random_pair(4, 20, 20);
        let mut wild = pred.values().to_vec();
        for (i, v) in wild.iter_mut().enumerate() {
            if !(m.bits()[i] && s.bits()[i]) {
                *v = 9.0;
            }
        }
        let wild = DepthImage::from_values(20, 20, wild).unwrap();
        assert_eq!(
            masked_l1(&pred, &gt, &m, &s).unwrap(),
            masked_l1(&wild, &gt, &m, &s).unwrap()
        );
        assert_eq!(
            masked_mse(&pred, &gt, &m, &s).unwrap(),
            masked_mse(&wild, &gt, &m, &s).unwrap()
        );
    }

    #[test]
    fn empty_mask_is_zero_and_mismatch_is_error() {
        let (pred, gt, m, _) = random_pair(1, 8, 8);
        let none = Mask::new(8, 8, false);
        assert_eq!(masked_l1(&pred, &gt, &m, &none).unwrap(), 0.0);
        assert_eq!(masked_mse(&pred, &gt, &m, &none).unwrap().pixels, 0);
        let small = Mask::new(4, 8, true);
        assert!(masked_l1(&pred, &gt, &small, &m).unwrap_err().is_validation());
    }

    #[test]
    fn dataset_mean_skips_empty_frames() {
        let k = CameraIntrinsics::centered(10.0, 4, 4).unwrap();
        let mut d = PairedDataset::new(k, 0.0, RigidTransform::identity(), 15.0).unwrap();
        let gt = DepthImage::from_fn(4, 4, |_, _| 1.0).unwrap();
        for (i, off) in [0.002, 0.004].iter().enumerate() {
            let lq = DepthImage::from_fn(4, 4, |_, _| 1.0 + off).unwrap();
            d.push(PairedRecord {
                lq_index: i,
                hq_index: i,
                lq: Frame::new(RgbImage::new(4, 4), lq, i as u64),
                gt_depth: gt.clone(),
                gt_color: RgbImage::new(4, 4),
                gap_ms: 0.0,
            })
            .unwrap();
        }
        d.push(PairedRecord {
            lq_index: 2,
            hq_index: 2,
            lq: Frame::new(RgbImage::new(4, 4), gt.clone(), 2),
            gt_depth: DepthImage::empty(4, 4),
            gt_color: RgbImage::new(4, 4),
            gap_ms: 0.0,
        })
        .unwrap();
        let preds: Vec<_> = d.records().iter().map(|r| r.lq.depth.clone()).collect();
        let m = evaluate_dataset(&d, &preds).unwrap();
        assert_eq!((m.evaluated_frames, m.skipped_frames), (2, 1));
        assert!((m.mean_mse_mm2 - 10.0).abs() < 1e-6);
        assert!((m.mean_l1_mm - 3.0).abs() < 1e-9);
        assert!(evaluate_dataset(&d, &preds[..2]).is_err());
    }

    #[test]
    fn heatmap_scales_errors() {
        let gt = DepthImage::from_fn(2, 1, |_, _| 1.0).unwrap();
        let pred = DepthImage::from_values(2, 1, vec![1.01, 1.1]).unwrap();
        let all = Mask::new(2, 1, true);
        let img = error_heatmap(&pred, &gt, &all, &all, 20.0).unwrap();
        assert_eq!(img.get_pixel(0, 0)[0], 128);
        assert_eq!(img.get_pixel(1, 0)[0], 255);
    }

    proptest! {
        #[test]
        fn l1_is_symmetric_and_nonnegative(seed in 0u64..1000) {
            let (pred, gt, m, s) = random_pair(seed, 9, 7);
            let a = masked_l1(&pred, &gt, &m, &s).unwrap();
            let b = masked_l1(&gt, &pred, &m, &s).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
            prop_assert!(masked_mse(&pred, &gt, &m, &s).unwrap().mse_mm2 >= 0.0);
        }

        #[test]
        fn disjoint_partitions_combine_as_weighted_means(seed in 0u64..1000) {
            let (pred, gt, m, s) = random_pair(seed, 11, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let split: Vec<bool> = (0..99).map(|_| rng.random()).collect();
            let a = Mask::from_bits(11, 9, split.clone()).unwrap();
            let b = Mask::from_bits(11, 9, split.iter().map(|v| !v).collect()).unwrap();
            let whole = masked_mse(&pred, &gt, &m, &s).unwrap();
            let pa = masked_mse(&pred, &gt, &m, &s.and(&a)).unwrap();
            let pb = masked_mse(&pred, &gt, &m, &s.and(&b)).unwrap();
            prop_assert_eq!(pa.pixels + pb.pixels, whole.pixels);
            if whole.pixels > 0 {
                let combined = (pa.mse_mm2 * pa.pixels as f64 + pb.mse_mm2 * pb.pixels as f64) / whole.pixels as f64;
                prop_assert!((combined - whole.mse_mm2).abs() <= 1e-9 * whole.mse_mm2.max(1.0));
            }
        }
    }
}
