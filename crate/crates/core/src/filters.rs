//! Classical depth denoisers: bilateral, joint bilateral and rolling guidance
//! filters, plus a grid search for their parameters.
//!
//! All three share one cross-bilateral kernel. Missing depth contributes no
//! weight, and an output pixel is missing when its total weight is below
//! [`MIN_WEIGHT`].

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, DatasetMetrics};
use crate::geometry::DepthImage;
use crate::sequence_io::{Frame, PairedDataset};

pub const MIN_WEIGHT: f64 = 1e-12;

/// Kernel parameters. `sigma_range` is in meters for depth-guided filters and
/// in 8-bit intensity units for color-guided ones; it may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub sigma_space: f64,
    pub sigma_range: f64,
    pub radius: u32,
    /// Rolling guidance iterations; ignored by the other filters.
    pub iterations: usize,
}

impl FilterParams {
    /// Parameters with radius `ceil(3 sigma_space)` and one iteration.
    pub fn new(sigma_space: f64, sigma_range: f64) -> Result<Self> {
        let p = Self {
            sigma_space,
            sigma_range,
            radius: (3.0 * sigma_space).ceil().max(1.0) as u32,
            iterations: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_radius(mut self, radius: u32) -> Result<Self> {
        self.radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Result<Self> {
        self.iterations = iterations;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_space > 0.0 && self.sigma_space.is_finite()) {
            return Err(Error::invalid(format!(
                "spatial sigma must be positive, got {}",
                self.sigma_space
            )));
        }
        if !(self.sigma_range > 0.0) {
            return Err(Error::invalid(format!(
                "range sigma must be positive, got {}",
                self.sigma_range
            )));
        }
        if self.radius < 1 {
            return Err(Error::invalid("window radius must be at least 1"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        Ok(())
    }
}

/// Rec. 601 luma of an RGB image, in `[0, 255]`.
pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Weighted mean of valid depth around each pixel with weight
/// `exp(-|p-q|²/2σs²) · exp(-(g_q-g_p)²/2σr²)`. `NaN` guide values are
/// undefined: they exclude a neighbor and leave a center without output,
/// unless the range sigma is infinite.
fn cross_filter(d: &DepthImage, guide: &[f64], sigma_space: f64, sigma_range: f64, radius: u32) -> DepthImage {
    let (w, h) = d.dimensions();
    let r = radius as i64;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_space * sigma_space)).exp())
        .collect();
    let use_range = sigma_range.is_finite();
    let inv_2r2 = 1.0 / (2.0 * sigma_range * sigma_range);
    let src = d.values();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(w as usize).enumerate().for_each(|(y, row)| {
        let y = y as i64;
        for (x, o) in row.iter_mut().enumerate() {
            let x = x as i64;
            let gc = guide[(y * w as i64 + x) as usize];
            if use_range && gc.is_nan() {
                continue;
            }
            let (mut sw, mut sd) = (0.0, 0.0);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let q = (yy * w as i64 + xx) as usize;
                    let dq = src[q];
                    if dq <= 0.0 {
                        continue;
                    }
                    let mut wt = spatial[((dy + r) * (2 * r + 1) + dx + r) as usize];
                    if use_range {
                        let gq = guide[q];
                        if gq.is_nan() {
                            continue;
                        }
                        wt *= (-(gq - gc) * (gq - gc) * inv_2r2).exp();
                    }
                    sw += wt;
                    sd += wt * dq;
                }
            }
            if sw >= MIN_WEIGHT {
                *o = sd / sw;
            }
        }
    });
    DepthImage::from_values_with_range(w, h, out, f64::INFINITY).expect("weighted means of valid depth")
}

fn depth_guide(d: &DepthImage) -> Vec<f64> {
    d.values().iter().map(|&v| if v > 0.0 { v } else { f64::NAN }).collect()
}

/// Masked Gaussian blur: normalized spatial weights over valid neighbors.
pub fn gaussian_blur(d: &DepthImage, sigma_space: f64, radius: u32) -> Result<DepthImage> {
    FilterParams::new(sigma_space, f64::INFINITY)?.with_radius(radius)?;
    let guide = vec![0.0; d.values().len()];
    Ok(cross_filter(d, &guide, sigma_space, f64::INFINITY, radius))
}

/// Bilateral filter with depth range weights (range sigma in meters). Missing
/// pixels stay missing.
pub fn bilateral(d: &DepthImage, p: &FilterParams) -> Result<DepthImage> {
    p.validate()?;
    Ok(cross_filter(d, &depth_guide(d), p.sigma_space, p.sigma_range, p.radius))
}

/// Joint bilateral filter with range weights on guide luminance (range sigma in
/// intensity units). May fill holes where valid neighbors exist.
pub fn joint_bilateral(d: &DepthImage, guide: &RgbImage, p: &FilterParams) -> Result<DepthImage> {
    p.validate()?;
    if guide.dimensions() != d.dimensions() {
        return Err(Error::invalid(format!(
            "guide is {:?} but depth is {:?}",
            guide.dimensions(),
            d.dimensions()
        )));
    }
    Ok(cross_filter(
        d,
        &luminance(guide),
        p.sigma_space,
        p.sigma_range,
        p.radius,
    ))
}

/// Rolling guidance filter: a Gaussian blur, followed by `iterations - 1`
/// joint bilateral passes over the original depth, each guided by the
/// previous result (range sigma in meters).
pub fn rolling_guidance(d: &DepthImage, p: &FilterParams) -> Result<DepthImage> {
    Ok(rolling_guidance_steps(d, p)?.pop().expect("at least one iteration"))
}

/// Every intermediate result of [`rolling_guidance`], first to last.
pub fn rolling_guidance_steps(d: &DepthImage, p: &FilterParams) -> Result<Vec<DepthImage>> {
    p.validate()?;
    let mut steps = vec![gaussian_blur(d, p.sigma_space, p.radius)?];
    for _ in 1..p.iterations {
        let guide = depth_guide(steps.last().expect("non-empty"));
        steps.push(cross_filter(d, &guide, p.sigma_space, p.sigma_range, p.radius));
    }
    Ok(steps)
}

/// Maps an LQ frame to a denoised depth image of the same size.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn denoise(&self, frame: &Frame) -> Result<DepthImage>;

    /// Denoises a whole sequence; stateful denoisers may override this.
    fn denoise_sequence(&self, frames: &[Frame]) -> Result<Vec<DepthImage>> {
        frames.par_iter().map(|f| self.denoise(f)).collect()
    }
}

/// Returns the input depth unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Denoiser for Passthrough {
    fn name(&self) -> &str {
        "raw"
    }

    fn denoise(&self, frame: &Frame) -> Result<DepthImage> {
        Ok(frame.depth.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bf,
    Jbf,
    Rgf,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Bf => "bf",
            FilterKind::Jbf => "jbf",
            FilterKind::Rgf => "rgf",
        }
    }
}

/// One of the three filters with fixed parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDenoiser {
    pub kind: FilterKind,
    pub params: FilterParams,
}

impl FilterDenoiser {
    pub fn new(kind: FilterKind, params: FilterParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { kind, params })
    }
}

impl Denoiser for FilterDenoiser {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn denoise(&self, frame: &Frame) -> Result<DepthImage> {
        match self.kind {
            FilterKind::Bf => bilateral(&frame.depth, &self.params),
            FilterKind::Jbf => joint_bilateral(&frame.depth, &frame.color, &self.params),
            FilterKind::Rgf => rolling_guidance(&frame.depth, &self.params),
        }
    }
}

/// Cartesian parameter grid; radius follows `ceil(3 sigma_space)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub sigma_space: Vec<f64>,
    pub sigma_range: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl ParamGrid {
    pub fn points(&self) -> Result<Vec<FilterParams>> {
        let mut out = Vec::new();
        for &s in &self.sigma_space {
            for &r in &self.sigma_range {
                for &k in &self.iterations {
                    out.push(FilterParams::new(s, r)?.with_iterations(k)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub params: FilterParams,
    pub mse_mm2: f64,
    /// Dataset MSE of every grid point, in grid order.
    pub scores: Vec<(FilterParams, f64)>,
}

/// Runs a denoiser over every record's LQ frame and scores it against the
/// ground truth.
pub fn score_denoiser(den: &dyn Denoiser, paired: &PairedDataset) -> Result<DatasetMetrics> {
    let preds = paired
        .records()
        .par_iter()
        .map(|r| den.denoise(&r.lq))
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(paired, &preds)
}

fn tie_key(p: &FilterParams) -> (f64, f64, u32, usize) {
    (p.sigma_space, p.sigma_range, p.radius, p.iterations)
}

/// Exhaustive search for the grid point with the lowest dataset MSE; equal
/// scores prefer smaller sigmas.
pub fn tune_params(kind: FilterKind, paired: &PairedDataset, grid: &[FilterParams]) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::invalid("parameter grid is empty"));
    }
    if paired.is_empty() {
        return Err(Error::invalid("paired dataset is empty"));
    }
    let scores = grid
        .iter()
        .map(|p| {
            let m = score_denoiser(&FilterDenoiser::new(kind, *p)?, paired)?;
            log::debug!("{} {:?}: mse {:.4} mm^2", kind.name(), p, m.mean_mse_mm2);
            Ok((*p, m.mean_mse_mm2))
        })
        .collect::<Result<Vec<_>>>()?;
    let (params, mse_mm2) = *scores
        .iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(tie_key(&a.0).partial_cmp(&tie_key(&b.0)).expect("finite"))
        })
        .expect("non-empty grid");
    Ok(TuneResult {
        params,
        mse_mm2,
        scores,
    })
}
