//! Metadata analysis and time-based batching of source images.

mod exif_meta;
pub mod iptc;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("no frames found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("frame rate must be positive, got {0}")]
    InvalidFps(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorspaceClass {
    Color,
    GrayscaleIr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayNight {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampSource {
    Exif,
    FileMtime,
    Synthetic,
}

/// One source image and the metadata extracted from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub captured_at: NaiveDateTime,
    pub timestamp_source: TimestampSource,
    pub colorspace_class: ColorspaceClass,
    pub day_night: DayNight,
    pub keywords: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_serial: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lens_id: Option<String>,
}

/// A run of time-correlated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub member_ids: Vec<String>,
    pub span: [NaiveDateTime; 2],
}

/// Mean per-pixel (max channel - min channel), 8-bit scale, at or below
/// which an image counts as chroma-free (infrared night shot).
pub const GRAYSCALE_CHROMA_LIMIT: f64 = 2.0;
const CHROMA_GRID: u32 = 64;

/// Mean chroma sampled on a uniform 64x64 grid of pixel centres.
pub fn sampled_chroma(img: &RgbImage) -> f64 {
    let (w, h) = img.dimensions();
    let mut sum = 0u64;
    for gy in 0..CHROMA_GRID {
        let y = ((2 * gy + 1) as u64 * h as u64 / (2 * CHROMA_GRID) as u64) as u32;
        for gx in 0..CHROMA_GRID {
            let x = ((2 * gx + 1) as u64 * w as u64 / (2 * CHROMA_GRID) as u64) as u32;
            let [r, g, b] = img.get_pixel(x, y).0;
            sum += (r.max(g).max(b) - r.min(g).min(b)) as u64;
        }
    }
    sum as f64 / (CHROMA_GRID * CHROMA_GRID) as f64
}

pub fn classify_colorspace(img: &RgbImage) -> (ColorspaceClass, DayNight) {
    if sampled_chroma(img) <= GRAYSCALE_CHROMA_LIMIT {
        (ColorspaceClass::GrayscaleIr, DayNight::Night)
    } else {
        (ColorspaceClass::Color, DayNight::Day)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    /// Pattern whose first capture group holds the fractional-second digits
    /// of a file name, e.g. `_\d{2}-\d{2}-\d{2}-(\d{2})_` for
    /// `image22-03-29_19-36-20-79_14538.jpg`.
    pub subsecond_pattern: Option<Regex>,
}

fn decode(path: &Path, bytes: &[u8]) -> Result<RgbImage, IngestError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| IngestError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn file_mtime(path: &Path) -> Result<NaiveDateTime, IngestError> {
    let modified = fs::metadata(path)
        .and_then(|m| m.modified())
        .map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(DateTime::<Utc>::from(modified).naive_utc())
}

fn filename_subsec(path: &Path, pattern: &Regex) -> Option<u32> {
    let name = path.file_name()?.to_string_lossy();
    let caps = pattern.captures(&name)?;
    exif_meta::subsec_nanos(caps.get(1)?.as_str())
}

/// Extracts size, colorspace class, timestamps, camera identifiers and IPTC
/// keywords from one image file.
pub fn analyze_image(
    path: &Path,
    image_id: &str,
    options: &AnalyzeOptions,
) -> Result<ImageRecord, IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let img = decode(path, &bytes)?;
    let (colorspace_class, day_night) = classify_colorspace(&img);
    let exif = exif_meta::read(&bytes);

    let (mut captured_at, timestamp_source) = match exif.captured_at {
        Some(t) => (t, TimestampSource::Exif),
        None => (file_mtime(path)?, TimestampSource::FileMtime),
    };
    if !exif.has_subsec {
        if let Some(nanos) = options
            .subsecond_pattern
            .as_ref()
            .and_then(|p| filename_subsec(path, p))
        {
            captured_at = captured_at.with_nanosecond(nanos).unwrap_or(captured_at);
        }
    }

    Ok(ImageRecord {
        image_id: image_id.to_string(),
        path: path.to_path_buf(),
        width: img.width(),
        height: img.height(),
        captured_at,
        timestamp_source,
        colorspace_class,
        day_night,
        keywords: iptc::read_keywords(&bytes),
        camera_model: exif.camera_model,
        camera_serial: exif.camera_serial,
        lens_id: exif.lens_id,
    })
}

fn extension_matches(path: &Path, extensions: &[String]) -> bool {
    let Some(ext) = path.extension().map(|e| e.to_string_lossy().to_lowercase()) else {
        return false;
    };
    extensions
        .iter()
        .any(|e| e.trim_start_matches('.').eq_ignore_ascii_case(&ext))
}

/// Lists input files under `dir` matching `extensions`, as
/// `(image_id, path)` pairs sorted by id. The id is the `/`-separated path
/// relative to `dir`.
pub fn scan_inputs(dir: &Path, extensions: &[String]) -> Result<Vec<(String, PathBuf)>, IngestError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(true) {
        let entry = entry.map_err(|e| IngestError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() || !extension_matches(entry.path(), extensions) {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        out.push((id, entry.path().to_path_buf()));
    }
    out.sort();
    Ok(out)
}

fn seconds_between(a: NaiveDateTime, b: NaiveDateTime) -> f64 {
    let d = b - a;
    d.num_seconds() as f64 + d.subsec_nanos() as f64 * 1e-9
}

/// Sorts records by `(captured_at, path)` and starts a new batch whenever
/// the gap to the previous image exceeds `gap_seconds`.
pub fn split_batches(records: &[ImageRecord], gap_seconds: f64) -> Vec<Batch> {
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.captured_at, &a.path).cmp(&(b.captured_at, &b.path)));

    let mut groups: Vec<Vec<&ImageRecord>> = Vec::new();
    for rec in sorted {
        match groups.last_mut() {
            Some(current)
                if seconds_between(current.last().unwrap().captured_at, rec.captured_at)
                    <= gap_seconds =>
            {
                current.push(rec)
            }
            _ => groups.push(vec![rec]),
        }
    }

    groups
        .into_iter()
        .enumerate()
        .map(|(idx, members)| Batch {
            batch_id: format!("batch-{idx:04}"),
            span: [members[0].captured_at, members[members.len() - 1].captured_at],
            member_ids: members.iter().map(|r| r.image_id.clone()).collect(),
        })
        .collect()
}

/// Ingests a directory of pre-extracted video frames. Frames are taken in
/// lexicographic file-name order and stamped `t0 + i / fps`.
pub fn ingest_video_frames(
    frame_dir: &Path,
    fps: f64,
    t0: NaiveDateTime,
    extensions: &[String],
) -> Result<Vec<ImageRecord>, IngestError> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(IngestError::InvalidFps(fps));
    }
    let frames = scan_inputs(frame_dir, extensions)?;
    if frames.is_empty() {
        return Err(IngestError::EmptyDirectory(frame_dir.to_path_buf()));
    }
    let options = AnalyzeOptions::default();
    frames
        .iter()
        .enumerate()
        .map(|(i, (id, path))| {
            let mut rec = analyze_image(path, id, &options)?;
            let offset_ns = (i as f64 * 1e9 / fps).round() as i64;
            rec.captured_at = t0 + Duration::nanoseconds(offset_ns);
            rec.timestamp_source = TimestampSource::Synthetic;
            Ok(rec)
        })
        .collect()
}
