//! Preprocessing (lens correction) and background-subtraction segmentation.

pub mod crops;
pub mod mask;
pub mod mog2;
pub mod undistort;

use crate::region::Region;
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crops::{extract_crop, extract_crops, CropOrigin, CropRecord};
pub use mask::MaskParams;
pub use mog2::{MixtureModel, ModelInit, Mog2Params};
pub use undistort::{preprocess, CameraProfile, ProfileError, ProfileSet};

pub const DEFAULT_PROCESSING_LONG_SIDE: u32 = 960;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Mog2,
    ImgDiff,
}

impl SegmenterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmenterKind::Mog2 => "mog2",
            SegmenterKind::ImgDiff => "img_diff",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    pub method: SegmenterKind,
    /// Frames are downscaled so their long side is at most this before
    /// modelling; `null` keeps full resolution.
    pub processing_long_side: Option<u32>,
    pub mask: MaskParams,
    pub mog2: Mog2Params,
    /// Img-diff grayscale threshold on the 8-bit scale.
    pub diff_threshold: u8,
    /// Crops whose long side exceeds this are downscaled to it; `null`
    /// keeps them at full resolution.
    pub crop_long_side: Option<u32>,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            method: SegmenterKind::Mog2,
            processing_long_side: Some(DEFAULT_PROCESSING_LONG_SIDE),
            mask: MaskParams::default(),
            mog2: Mog2Params::default(),
            diff_threshold: 25,
            crop_long_side: None,
        }
    }
}

/// Regions found on one frame, in original-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRegions {
    pub image_id: String,
    pub regions: Vec<Region>,
    /// Raw foreground mask at processing resolution.
    pub mask: GrayImage,
}

#[derive(Debug, Clone, Default)]
pub struct SegmentOutput {
    pub frames: Vec<FrameRegions>,
    /// Frames whose dimensions differ from the batch's first frame.
    pub skipped: Vec<String>,
}

/// Splits off frames that do not match the first frame's size.
fn partition_sizes<'a>(frames: &'a [(String, RgbImage)]) -> (Vec<&'a (String, RgbImage)>, Vec<String>) {
    let Some(first) = frames.first() else {
        return (Vec::new(), Vec::new());
    };
    let dims = first.1.dimensions();
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for f in frames {
        if f.1.dimensions() == dims {
            kept.push(f);
        } else {
            log::warn!(
                "skipping {}: {}x{} differs from batch size {}x{}",
                f.0,
                f.1.width(),
                f.1.height(),
                dims.0,
                dims.1
            );
            skipped.push(f.0.clone());
        }
    }
    (kept, skipped)
}

fn processing_scale(w: u32, h: u32, long_side: Option<u32>) -> f64 {
    match long_side {
        Some(t) if t > 0 && w.max(h) > t => t as f64 / w.max(h) as f64,
        _ => 1.0,
    }
}

fn downscale(img: &RgbImage, scale: f64) -> RgbImage {
    if scale == 1.0 {
        return img.clone();
    }
    let nw = ((img.width() as f64 * scale).round() as u32).max(1);
    let nh = ((img.height() as f64 * scale).round() as u32).max(1);
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// Mask → boxes at processing resolution, rescaled outward to the
/// original frame, then padded in original pixels.
fn regions_from_mask(mask: &GrayImage, params: &MaskParams, scale: f64, orig_w: u32, orig_h: u32) -> Vec<Region> {
    let unpadded = MaskParams {
        pad_px: 0,
        ..params.clone()
    };
    let mut out: Vec<Region> = mask::mask_to_regions(mask, &unpadded)
        .into_iter()
        .filter_map(|r| {
            let r = if scale == 1.0 {
                r
            } else {
                Region::from_corners_clamped(
                    (r.x as f64 / scale).floor(),
                    (r.y as f64 / scale).floor(),
                    (r.right() as f64 / scale).ceil(),
                    (r.bottom() as f64 / scale).ceil(),
                    orig_w,
                    orig_h,
                )?
            };
            Some(r.padded(params.pad_px, orig_w, orig_h))
        })
        .collect();
    out.sort_by_key(Region::sort_key);
    out
}

/// Adaptive mixture-model segmentation of one batch. The model lives only
/// for this call. Regions on the first `burn_in` frames are suppressed.
pub fn segment_mog2(frames: &[(String, RgbImage)], params: &SegmentParams) -> SegmentOutput {
    let (kept, skipped) = partition_sizes(frames);
    if kept.is_empty() {
        return SegmentOutput { frames: Vec::new(), skipped };
    }
    let (ow, oh) = kept[0].1.dimensions();
    let scale = processing_scale(ow, oh, params.processing_long_side);
    let small: Vec<RgbImage> = kept.par_iter().map(|f| downscale(&f.1, scale)).collect();
    let (sw, sh) = small[0].dimensions();

    let alpha = params.mog2.alpha_for(small.len());
    let burn_in = params.mog2.burn_in_for(alpha);
    let mut model = MixtureModel::new(sw, sh, &params.mog2);
    match params.mog2.init {
        ModelInit::BatchMedian => {
            let refs: Vec<&RgbImage> = small.iter().collect();
            model.seed(&mog2::median_image(&refs));
        }
        ModelInit::FirstFrame => model.seed(&small[0]),
    }

    let out = kept
        .iter()
        .zip(&small)
        .enumerate()
        .map(|(i, (f, img))| {
            let mask = model.apply(img, alpha);
            let regions = if i < burn_in {
                Vec::new()
            } else {
                regions_from_mask(&mask, &params.mask, scale, ow, oh)
            };
            FrameRegions {
                image_id: f.0.clone(),
                regions,
                mask,
            }
        })
        .collect();
    SegmentOutput { frames: out, skipped }
}

/// Per-pixel mean of equally sized frames.
pub fn mean_image(frames: &[RgbImage]) -> Vec<[f32; 3]> {
    let n = frames[0].pixels().len();
    let mut acc = vec![[0u64; 3]; n];
    for f in frames {
        for (a, p) in acc.iter_mut().zip(f.pixels()) {
            for c in 0..3 {
                a[c] += p.0[c] as u64;
            }
        }
    }
    let k = frames.len() as f32;
    acc.into_iter().map(|a| a.map(|v| v as f32 / k)).collect()
}

/// Foreground where the luma of |frame − mean| exceeds `threshold`.
pub fn diff_mask(frame: &RgbImage, mean: &[[f32; 3]], threshold: u8) -> GrayImage {
    let mut out = GrayImage::new(frame.width(), frame.height());
    for ((p, m), o) in frame.pixels().zip(mean).zip(out.pixels_mut()) {
        let d = |c: usize| (p.0[c] as f32 - m[c]).abs();
        let luma = 0.299 * d(0) + 0.587 * d(1) + 0.114 * d(2);
        *o = Luma([if luma > threshold as f32 { mask::FOREGROUND } else { 0 }]);
    }
    out
}

/// Difference-to-batch-mean segmentation.
pub fn segment_imgdiff(frames: &[(String, RgbImage)], params: &SegmentParams) -> SegmentOutput {
    let (kept, skipped) = partition_sizes(frames);
    if kept.is_empty() {
        return SegmentOutput { frames: Vec::new(), skipped };
    }
    let (ow, oh) = kept[0].1.dimensions();
    let scale = processing_scale(ow, oh, params.processing_long_side);
    let small: Vec<RgbImage> = kept.par_iter().map(|f| downscale(&f.1, scale)).collect();
    let mean = mean_image(&small);
    let out = kept
        .par_iter()
        .zip(small.par_iter())
        .map(|(f, img)| {
            let mask = diff_mask(img, &mean, params.diff_threshold);
            FrameRegions {
                image_id: f.0.clone(),
                regions: regions_from_mask(&mask, &params.mask, scale, ow, oh),
                mask,
            }
        })
        .collect();
    SegmentOutput { frames: out, skipped }
}

pub fn segment(frames: &[(String, RgbImage)], params: &SegmentParams) -> SegmentOutput {
    match params.method {
        SegmenterKind::Mog2 => segment_mog2(frames, params),
        SegmenterKind::ImgDiff => segment_imgdiff(frames, params),
    }
}
