//! On-disk layout for recorded RGB-D sequences and paired ground-truth
//! datasets.
//!
//! A sequence directory holds `manifest.json` plus `color/%06d.png` (8-bit RGB),
//! `depth/%06d.png` (16-bit gray, millimeters, 0 = missing) and optionally
//! `mask/%06d.png` (8-bit gray, nonzero = foreground).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::geometry::{CameraIntrinsics, DepthImage, Mask, RigidTransform};

pub const MANIFEST: &str = "manifest.json";

/// Which sensor of the rig a sequence was recorded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sensor {
    #[serde(rename = "LQ")]
    Lq,
    #[serde(rename = "HQ")]
    Hq,
}

/// One timestamped color + depth measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: RgbImage,
    pub depth: DepthImage,
    /// Microseconds in the recording device's own clock.
    pub timestamp_us: u64,
    /// Optional foreground (person) segmentation.
    pub mask: Option<Mask>,
}

impl Frame {
    pub fn new(color: RgbImage, depth: DepthImage, timestamp_us: u64) -> Self {
        Self {
            color,
            depth,
            timestamp_us,
            mask: None,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.depth.dimensions()
    }

    /// The segmentation mask, or an all-ones mask when none was recorded.
    pub fn segmentation(&self) -> Mask {
        match &self.mask {
            Some(m) => m.clone(),
            None => {
                let (w, h) = self.dimensions();
                Mask::new(w, h, true)
            }
        }
    }
}

/// An ordered, validated stream of frames from one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub sensor: Sensor,
    pub intrinsics: CameraIntrinsics,
    frames: Vec<Frame>,
}

impl Sequence {
    pub fn new(
        id: impl Into<String>,
        sensor: Sensor,
        intrinsics: CameraIntrinsics,
        frames: Vec<Frame>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("sequence must contain at least one frame"));
        }
        let dims = intrinsics.dimensions();
        for (i, f) in frames.iter().enumerate() {
            if f.depth.dimensions() != dims || f.color.dimensions() != dims {
                return Err(Error::invalid(format!(
                    "frame {i}: color {:?} / depth {:?} do not match intrinsics {:?}",
                    f.color.dimensions(),
                    f.depth.dimensions(),
                    dims
                )));
            }
            if let Some(m) = &f.mask {
                if m.dimensions() != dims {
                    return Err(Error::invalid(format!(
                        "frame {i}: mask {:?} does not match intrinsics {:?}",
                        m.dimensions(),
                        dims
                    )));
                }
            }
            if i > 0 && f.timestamp_us <= frames[i - 1].timestamp_us {
                return Err(Error::invalid(format!(
                    "frame {i}: timestamp {} not after {}",
                    f.timestamp_us,
                    frames[i - 1].timestamp_us
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            sensor,
            intrinsics,
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps_us(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.timestamp_us).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceManifest {
    sensor: Sensor,
    intrinsics: CameraIntrinsics,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    color: String,
    depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    timestamp_us: u64,
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<(PathBuf, T)> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(LoadError::MissingManifest { path }.into());
    }
    let text = fs::read_to_string(&path).map_err(|e| LoadError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest = serde_json::from_str(&text).map_err(|e| LoadError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok((path, manifest))
}

fn check_dims(path: &Path, expected: (u32, u32), found: (u32, u32)) -> Result<()> {
    if expected != found {
        return Err(LoadError::DimensionMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| {
        LoadError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

/// Reads a 16-bit millimeter depth PNG into meters.
pub fn read_depth_png(path: &Path, expected: (u32, u32)) -> Result<DepthImage> {
    let img = match open_image(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(LoadError::UnreadableImage {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit grayscale depth, found {:?}", other.color()),
            }
            .into())
        }
    };
    check_dims(path, expected, img.dimensions())?;
    let (w, h) = img.dimensions();
    DepthImage::from_millimeters(w, h, img.as_raw())
}

pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let mm = depth.to_millimeters()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width(), depth.height(), mm).expect("buffer size matches");
    img.save(path).map_err(|e| Error::write(path, e))
}

pub fn read_color_png(path: &Path, expected: (u32, u32)) -> Result<RgbImage> {
    let img = match open_image(path)? {
        DynamicImage::ImageRgb8(img) => img,
        other @ (DynamicImage::ImageLuma8(_) | DynamicImage::ImageRgba8(_)) => other.to_rgb8(),
        other => {
            return Err(LoadError::UnreadableImage {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit color, found {:?}", other.color()),
            }
            .into())
        }
    };
    check_dims(path, expected, img.dimensions())?;
    Ok(img)
}

pub fn write_color_png(path: &Path, color: &RgbImage) -> Result<()> {
    color.save(path).map_err(|e| Error::write(path, e))
}

pub fn read_mask_png(path: &Path, expected: (u32, u32)) -> Result<Mask> {
    let img = match open_image(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(LoadError::UnreadableImage {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            }
            .into())
        }
    };
    check_dims(path, expected, img.dimensions())?;
    let (w, h) = img.dimensions();
    Mask::from_bits(w, h, img.as_raw().iter().map(|v| *v != 0).collect())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (w, h) = mask.dimensions();
    let img = GrayImage::from_raw(w, h, mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect())
        .expect("buffer size matches");
    img.save(path).map_err(|e| Error::write(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::write(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::write(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::write(path, e))
}

fn frame_file(sub: &str, index: usize) -> String {
    format!("{sub}/{index:06}.png")
}

/// Loads and validates a sequence directory. The sequence id is the
/// directory name.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let (manifest_path, manifest): (_, SequenceManifest) = read_manifest(dir)?;
    if manifest.frames.is_empty() {
        return Err(LoadError::InvalidField {
            path: manifest_path,
            field: "frames".into(),
            reason: "sequence has no frames".into(),
        }
        .into());
    }
    let dims = manifest.intrinsics.dimensions();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, entry) in manifest.frames.iter().enumerate() {
        if let Some(prev) = frames.last().map(|f: &Frame| f.timestamp_us) {
            if entry.timestamp_us <= prev {
                return Err(LoadError::NonMonotoneTimestamps {
                    path: manifest_path,
                    index: i,
                    previous: prev,
                    current: entry.timestamp_us,
                }
                .into());
            }
        }
        let color = read_color_png(&dir.join(&entry.color), dims)?;
        let depth = read_depth_png(&dir.join(&entry.depth), dims)?;
        let mask = match &entry.mask {
            Some(m) => Some(read_mask_png(&dir.join(m), dims)?),
            None => None,
        };
        frames.push(Frame {
            color,
            depth,
            timestamp_us: entry.timestamp_us,
            mask,
        });
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sequence::new(id, manifest.sensor, manifest.intrinsics, frames)
}

/// Writes a sequence directory readable by [`load_sequence`]. Depth is
/// rounded to whole millimeters.
pub fn save_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    // Validate the whole payload before touching the filesystem.
    for f in seq.frames() {
        f.depth.to_millimeters()?;
    }

    create_dir(&dir.join("color"))?;
    create_dir(&dir.join("depth"))?;
    if seq.frames().iter().any(|f| f.mask.is_some()) {
        create_dir(&dir.join("mask"))?;
    }
    let mut entries = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames().iter().enumerate() {
        let entry = FrameEntry {
            color: frame_file("color", i),
            depth: frame_file("depth", i),
            mask: f.mask.as_ref().map(|_| frame_file("mask", i)),
            timestamp_us: f.timestamp_us,
        };
        write_color_png(&dir.join(&entry.color), &f.color)?;
        write_depth_png(&dir.join(&entry.depth), &f.depth)?;
        if let (Some(m), Some(file)) = (&f.mask, &entry.mask) {
            write_mask_png(&dir.join(file), m)?;
        }
        entries.push(entry);
    }
    write_json(
        &dir.join(MANIFEST),
        &SequenceManifest {
            sensor: seq.sensor,
            intrinsics: seq.intrinsics,
            frames: entries,
        },
    )
}

/// One LQ frame paired with the HQ measurement reprojected into its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord {
    pub lq_index: usize,
    pub hq_index: usize,
    pub lq: Frame,
    /// Reprojected HQ depth; zero where no HQ point landed.
    pub gt_depth: DepthImage,
    pub gt_color: RgbImage,
    /// `|t_L - (t_H + shift)|` in milliseconds.
    pub gap_ms: f64,
}

impl PairedRecord {
    /// Ground-truth validity mask (pixels with reprojected HQ depth).
    pub fn valid_mask(&self) -> Mask {
        self.gt_depth.valid_mask()
    }
}

/// The reprojected HQ sequence aligned to an LQ sequence, with the alignment
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub intrinsics: CameraIntrinsics,
    pub shift_ms: f64,
    pub transform: RigidTransform,
    pub max_gap_ms: f64,
    records: Vec<PairedRecord>,
}

impl PairedDataset {
    pub fn new(
        intrinsics: CameraIntrinsics,
        shift_ms: f64,
        transform: RigidTransform,
        max_gap_ms: f64,
    ) -> Result<Self> {
        if !(max_gap_ms.is_finite() && max_gap_ms >= 0.0) {
            return Err(Error::invalid(format!(
                "max gap must be non-negative, got {max_gap_ms}"
            )));
        }
        Ok(Self {
            intrinsics,
            shift_ms,
            transform,
            max_gap_ms,
            records: Vec::new(),
        })
    }

    fn check_record(&self, r: &PairedRecord) -> Result<()> {
        if !(r.gap_ms >= 0.0 && r.gap_ms <= self.max_gap_ms) {
            return Err(Error::invalid(format!(
                "record for LQ frame {} has gap {} ms above threshold {} ms",
                r.lq_index, r.gap_ms, self.max_gap_ms
            )));
        }
        let dims = self.intrinsics.dimensions();
        let mask_ok = r.lq.mask.as_ref().is_none_or(|m| m.dimensions() == dims);
        if r.lq.dimensions() != dims
            || r.lq.color.dimensions() != dims
            || r.gt_depth.dimensions() != dims
            || r.gt_color.dimensions() != dims
            || !mask_ok
        {
            return Err(Error::invalid(format!(
                "record for LQ frame {} does not match LQ dimensions {:?}",
                r.lq_index, dims
            )));
        }
        Ok(())
    }

    /// Appends a record, rejecting it if its gap exceeds the threshold or its
    /// images do not match the LQ dimensions.
    pub fn push(&mut self, record: PairedRecord) -> Result<()> {
        self.check_record(&record)?;
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PairedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    intrinsics: CameraIntrinsics,
    shift_ms: f64,
    transform: RigidTransform,
    max_gap_ms: f64,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    lq_index: usize,
    hq_index: usize,
    timestamp_us: u64,
    gap_ms: f64,
    lq_color: String,
    lq_depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lq_mask: Option<String>,
    gt_depth: String,
    gt_color: String,
    valid_mask: String,
}

/// Writes a paired dataset: one manifest carrying the shift, transform and
/// per-record gaps, plus images under `lq_color/`, `lq_depth/`, `lq_mask/`,
/// `gt_depth/`, `gt_color/` and `valid/`.
pub fn save_paired_dataset(d: &PairedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for r in d.records() {
        d.check_record(r)?;
        r.lq.depth.to_millimeters()?;
        r.gt_depth.to_millimeters()?;
    }
    create_dir(dir)?;
    if !d.is_empty() {
        for sub in ["lq_color", "lq_depth", "gt_depth", "gt_color", "valid"] {
            create_dir(&dir.join(sub))?;
        }
        if d.records().iter().any(|r| r.lq.mask.is_some()) {
            create_dir(&dir.join("lq_mask"))?;
        }
    }
    let mut entries = Vec::with_capacity(d.len());
    for (i, r) in d.records().iter().enumerate() {
        let entry = RecordEntry {
            lq_index: r.lq_index,
            hq_index: r.hq_index,
            timestamp_us: r.lq.timestamp_us,
            gap_ms: r.gap_ms,
            lq_color: frame_file("lq_color", i),
            lq_depth: frame_file("lq_depth", i),
            lq_mask: r.lq.mask.as_ref().map(|_| frame_file("lq_mask", i)),
            gt_depth: frame_file("gt_depth", i),
            gt_color: frame_file("gt_color", i),
            valid_mask: frame_file("valid", i),
        };
        write_color_png(&dir.join(&entry.lq_color), &r.lq.color)?;
        write_depth_png(&dir.join(&entry.lq_depth), &r.lq.depth)?;
        if let (Some(m), Some(file)) = (&r.lq.mask, &entry.lq_mask) {
            write_mask_png(&dir.join(file), m)?;
        }
        write_depth_png(&dir.join(&entry.gt_depth), &r.gt_depth)?;
        write_color_png(&dir.join(&entry.gt_color), &r.gt_color)?;
        write_mask_png(&dir.join(&entry.valid_mask), &r.valid_mask())?;
        entries.push(entry);
    }
    write_json(
        &dir.join(MANIFEST),
        &DatasetManifest {
            intrinsics: d.intrinsics,
            shift_ms: d.shift_ms,
            transform: d.transform,
            max_gap_ms: d.max_gap_ms,
            records: entries,
        },
    )
}

pub fn load_paired_dataset(dir: impl AsRef<Path>) -> Result<PairedDataset> {
    let dir = dir.as_ref();
    let (manifest_path, m): (_, DatasetManifest) = read_manifest(dir)?;
    let dims = m.intrinsics.dimensions();
    let mut out = PairedDataset::new(m.intrinsics, m.shift_ms, m.transform, m.max_gap_ms)?;
    for (i, e) in m.records.iter().enumerate() {
        let mask = match &e.lq_mask {
            Some(file) => Some(read_mask_png(&dir.join(file), dims)?),
            None => None,
        };
        let gt_depth = read_depth_png(&dir.join(&e.gt_depth), dims)?;
        let valid_path = dir.join(&e.valid_mask);
        if read_mask_png(&valid_path, dims)? != gt_depth.valid_mask() {
            return Err(LoadError::InvalidField {
                path: valid_path,
                field: "valid_mask".into(),
                reason: "does not match nonzero ground-truth depth".into(),
            }
            .into());
        }
        let record = PairedRecord {
            lq_index: e.lq_index,
            hq_index: e.hq_index,
            lq: Frame {
                color: read_color_png(&dir.join(&e.lq_color), dims)?,
                depth: read_depth_png(&dir.join(&e.lq_depth), dims)?,
                timestamp_us: e.timestamp_us,
                mask,
            },
            gt_depth,
            gt_color: read_color_png(&dir.join(&e.gt_color), dims)?,
            gap_ms: e.gap_ms,
        };
        out.push(record).map_err(|err| LoadError::InvalidField {
            path: manifest_path.clone(),
            field: format!("records[{i}]"),
            reason: err.to_string(),
        })?;
    }
    Ok(out)
}
