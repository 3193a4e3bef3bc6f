//! Classical detector-matcher: Harris corners, normalized cross-correlation
//! patch descriptors, mutual nearest neighbours with a ratio test.

use image::RgbImage;

use super::{Correspondence, CorrespondenceProvider, PairView};
use crate::error::{Error, Result};
use crate::geometry::Pixel;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicProvider {
    /// Harris `k` in `det - k tr²`.
    pub harris_k: f64,
    /// Corners weaker than this fraction of the strongest response are ignored.
    pub relative_threshold: f64,
    /// Non-maximum suppression radius in pixels.
    pub nms_radius: u32,
    pub max_corners: usize,
    /// Descriptor patch half-size; patches are `(2r+1)²`.
    pub patch_radius: u32,
    /// Candidates farther apart than this (pixels) are never matched.
    pub search_radius: f64,
    /// Accept a match only if `best < ratio * second_best` in `1 - NCC`.
    pub ratio: f64,
    /// Minimum NCC of an accepted match.
    pub min_ncc: f64,
}

impl Default for ClassicProvider {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            relative_threshold: 0.01,
            nms_radius: 3,
            max_corners: 800,
            patch_radius: 5,
            search_radius: 40.0,
            ratio: 0.8,
            min_ncc: 0.7,
        }
    }
}

/// Grayscale image in `[0, 1]` with an optional validity mask.
struct Gray {
    width: u32,
    height: u32,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl Gray {
    fn from_rgb(img: &RgbImage, valid: Option<&[bool]>) -> Self {
        let values = img
            .pixels()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        let valid = match valid {
            Some(v) => v.to_vec(),
            None => vec![true; img.width() as usize * img.height() as usize],
        };
        Self {
            width: img.width(),
            height: img.height(),
            values,
            valid,
        }
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// Fills holes with the mean of valid 8-neighbours, `passes` times.
    fn fill_holes(&mut self, passes: usize) {
        let (w, h) = (self.width as i64, self.height as i64);
        for _ in 0..passes {
            let mut values = self.values.clone();
            let mut valid = self.valid.clone();
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    if self.valid[i] {
                        continue;
                    }
                    let (mut s, mut n) = (0.0, 0);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx >= 0 && yy >= 0 && xx < w && yy < h {
                                let j = (yy * w + xx) as usize;
                                if self.valid[j] {
                                    s += self.values[j];
                                    n += 1;
                                }
                            }
                        }
                    }
                    if n > 0 {
                        values[i] = s / n as f64;
                        valid[i] = true;
                    }
                }
            }
            self.values = values;
            self.valid = valid;
        }
    }
}

struct Feature {
    x: u32,
    y: u32,
    /// Zero-mean, unit-norm patch.
    descriptor: Vec<f64>,
}

impl ClassicProvider {
    fn harris(&self, g: &Gray) -> Vec<f64> {
        let (w, h) = (g.width as usize, g.height as usize);
        let at = |x: usize, y: usize| g.values[y * w + x];
        let mut ixx = vec![0.0; w * h];
        let mut iyy = vec![0.0; w * h];
        let mut ixy = vec![0.0; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                let i = y * w + x;
                ixx[i] = gx * gx;
                iyy[i] = gy * gy;
                ixy[i] = gx * gy;
            }
        }
        let r = 2usize;
        let mut response = vec![0.0; w * h];
        for y in r + 1..h.saturating_sub(r + 1) {
            for x in r + 1..w.saturating_sub(r + 1) {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        let i = yy * w + xx;
                        a += ixx[i];
                        b += iyy[i];
                        c += ixy[i];
                    }
                }
                response[y * w + x] = a * b - c * c - self.harris_k * (a + b) * (a + b);
            }
        }
        response
    }

    fn patch(&self, g: &Gray, x: u32, y: u32) -> Option<Vec<f64>> {
        let r = self.patch_radius as i64;
        let (x, y) = (x as i64, y as i64);
        if x < r || y < r || x + r >= g.width as i64 || y + r >= g.height as i64 {
            return None;
        }
        let mut p = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                let i = g.idx(xx as u32, yy as u32);
                if !g.valid[i] {
                    return None;
                }
                p.push(g.values[i]);
            }
        }
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        p.iter_mut().for_each(|v| *v -= mean);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return None;
        }
        p.iter_mut().for_each(|v| *v /= norm);
        Some(p)
    }

    fn features(&self, g: &Gray) -> Vec<Feature> {
        let response = self.harris(g);
        let max = response.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let (w, h) = (g.width as i64, g.height as i64);
        let nr = self.nms_radius as i64;
        let mut corners = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = response[(y * w + x) as usize];
                if v <= self.relative_threshold * max || !g.valid[(y * w + x) as usize] {
                    continue;
                }
                let mut is_max = true;
                'nms: for yy in (y - nr).max(0)..=(y + nr).min(h - 1) {
                    for xx in (x - nr).max(0)..=(x + nr).min(w - 1) {
                        let o = response[(yy * w + xx) as usize];
                        // Strict on earlier pixels so plateaus keep exactly one corner.
                        if o > v || (o == v && (yy, xx) < (y, x)) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    corners.push((v, x as u32, y as u32));
                }
            }
        }
        corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
        corners
            .into_iter()
            .filter_map(|(_, x, y)| self.patch(g, x, y).map(|descriptor| Feature { x, y, descriptor }))
            .take(self.max_corners)
            .collect()
    }

    /// Index of the best match of `a` in `bs` (distance `1 - NCC`), if it
    /// passes the window, ratio and NCC tests.
    fn best(&self, a: &Feature, bs: &[Feature]) -> Option<usize> {
        let r2 = self.search_radius * self.search_radius;
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = f64::INFINITY;
        for (j, b) in bs.iter().enumerate() {
            let dx = a.x as f64 - b.x as f64;
            let dy = a.y as f64 - b.y as f64;
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let ncc: f64 = a.descriptor.iter().zip(&b.descriptor).map(|(p, q)| p * q).sum();
            let d = 1.0 - ncc;
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        (best.1 != usize::MAX && 1.0 - best.0 >= self.min_ncc && best.0 < self.ratio * second).then_some(best.1)
    }
}

impl CorrespondenceProvider for ClassicProvider {
    fn name(&self) -> &str {
        "classic"
    }

    fn correspondences(&self, view: &PairView<'_>) -> Result<Vec<Correspondence>> {
        let rep = view
            .reprojected
            .ok_or_else(|| Error::invalid("classic provider needs the reprojected HQ frame"))?;
        let color = rep
            .color
            .as_ref()
            .ok_or_else(|| Error::invalid("reprojected HQ frame carries no color"))?;
        let valid: Vec<bool> = rep.source.iter().map(Option::is_some).collect();
        let lq = Gray::from_rgb(&view.lq.color, None);
        let mut hq = Gray::from_rgb(color, Some(&valid));
        hq.fill_holes(2);

        let fl = self.features(&lq);
        let fh = self.features(&hq);
        let src_width = view.k_hq.width;
        let mut out = Vec::new();
        for (i, a) in fl.iter().enumerate() {
            let Some(j) = self.best(a, &fh) else { continue };
            if self.best(&fh[j], &fl) != Some(i) {
                continue;
            }
            // The corner must sit on a pixel that really received an HQ sample.
            let Some(hq_px) = rep.source_pixel(fh[j].x, fh[j].y, src_width) else {
                continue;
            };
            if !view.hq.depth.is_valid(hq_px.0, hq_px.1) {
                continue;
            }
            out.push(Correspondence {
                lq: Pixel::new(a.x as f64, a.y as f64),
                hq: hq_px,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reproject, CameraIntrinsics, DepthImage, RigidTransform};
    use crate::sequence_io::Frame;
    use image::Rgb;
    use nalgebra::Vector3;

    fn checker(w: u32, h: u32, shift: (i64, i64)) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (xx, yy) = (x as i64 - shift.0, y as i64 - shift.1);
            let c = ((xx.div_euclid(9) + yy.div_euclid(7)) % 2 == 0) as u8;
            let n = ((xx * 31 + yy * 17).rem_euclid(97)) as u8;
            Rgb([40 + 170 * c + n / 8, 60 + n, 90 + 120 * c])
        })
    }

    #[test]
    fn recovers_pixel_shift_on_planar_scene() {
        let k = CameraIntrinsics::centered(150.0, 160, 120).unwrap();
        let depth = DepthImage::from_fn(160, 120, |_, _| 2.0).unwrap();
        let hq = Frame::new(checker(160, 120, (0, 0)), depth.clone(), 0);
        let lq = Frame::new(checker(160, 120, (3, 2)), depth, 0);
        let t = RigidTransform::identity();
        let rep = reproject(&hq.depth, Some(&hq.color), &k, &k, &t).unwrap();
        let view = PairView {
            lq_index: 0,
            hq_index: 0,
            lq: &lq,
            hq: &hq,
            k_lq: &k,
            k_hq: &k,
            transform: &t,
            reprojected: Some(&rep),
        };
        let matches = ClassicProvider::default().correspondences(&view).unwrap();
        assert!(matches.len() >= 20, "only {} matches", matches.len());
        let good = matches
            .iter()
            .filter(|m| m.lq.x - m.hq.0 as f64 == 3.0 && m.lq.y - m.hq.1 as f64 == 2.0)
            .count();
        assert!(good as f64 >= 0.9 * matches.len() as f64);
    }

    #[test]
    fn flat_images_yield_nothing() {
        let k = CameraIntrinsics::centered(100.0, 64, 48).unwrap();
        let depth = DepthImage::from_fn(64, 48, |_, _| 1.0).unwrap();
        let f = Frame::new(RgbImage::from_pixel(64, 48, Rgb([128, 128, 128])), depth, 0);
        let t = RigidTransform::from_axis_angle(Vector3::y(), 0.0, Vector3::zeros());
        let rep = reproject(&f.depth, Some(&f.color), &k, &k, &t).unwrap();
        let view = PairView {
            lq_index: 0,
            hq_index: 0,
            lq: &f,
            hq: &f,
            k_lq: &k,
            k_hq: &k,
            transform: &t,
            reprojected: Some(&rep),
        };
        assert!(ClassicProvider::default().correspondences(&view).unwrap().is_empty());
    }

    #[test]
    fn requires_reprojection() {
        let k = CameraIntrinsics::centered(100.0, 8, 8).unwrap();
        let f = Frame::new(RgbImage::new(8, 8), DepthImage::empty(8, 8), 0);
        let t = RigidTransform::identity();
        let view = PairView {
            lq_index: 0,
            hq_index: 0,
            lq: &f,
            hq: &f,
            k_lq: &k,
            k_hq: &k,
            transform: &t,
            reprojected: None,
        };
        assert!(ClassicProvider::default().correspondences(&view).is_err());
    }
}
