//! Binary foreground masks to boxes: morphology and 8-connected components.

use crate::region::Region;
use image::{GrayImage, Luma};
use imageproc::distance_transform::Norm;
use imageproc::region_labelling::{connected_components, Connectivity};
use serde::{Deserialize, Serialize};

pub const FOREGROUND: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Minimum component size as a fraction of the frame area.
    pub min_area_fraction: f64,
    pub pad_px: u32,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.0005,
            pad_px: 10,
        }
    }
}

/// One erode pass followed by two dilate passes, 3x3 structuring element.
pub fn clean(mask: &GrayImage) -> GrayImage {
    let eroded = imageproc::morphology::erode(mask, Norm::LInf, 1);
    let once = imageproc::morphology::dilate(&eroded, Norm::LInf, 1);
    imageproc::morphology::dilate(&once, Norm::LInf, 1)
}

/// Bounding box and pixel count of every 8-connected foreground component,
/// ordered by label (raster order of first pixel).
pub fn components(mask: &GrayImage) -> Vec<(Region, u64)> {
    // imageproc's labeller overflows its union-find on a 1x1 foreground
    // image; a zero border sidesteps that and is shifted out below.
    let mut framed = GrayImage::new(mask.width() + 2, mask.height() + 2);
    image::imageops::replace(&mut framed, mask, 1, 1);
    let labels = connected_components(&framed, Connectivity::Eight, Luma([0u8]));
    let mut acc: Vec<Option<(u32, u32, u32, u32, u64)>> = Vec::new();
    for (x, y, px) in labels.enumerate_pixels() {
        let label = px.0[0] as usize;
        if label == 0 {
            continue;
        }
        if acc.len() <= label {
            acc.resize(label + 1, None);
        }
        let entry = acc[label].get_or_insert((x, y, x, y, 0));
        entry.0 = entry.0.min(x);
        entry.1 = entry.1.min(y);
        entry.2 = entry.2.max(x);
        entry.3 = entry.3.max(y);
        entry.4 += 1;
    }
    acc.into_iter()
        .flatten()
        .map(|(x0, y0, x1, y1, n)| (Region::new(x0 - 1, y0 - 1, x1 - x0 + 1, y1 - y0 + 1), n))
        .collect()
}

/// Cleans a raw mask and turns large-enough components into padded boxes,
/// sorted by `(y, x)`.
pub fn mask_to_regions(raw: &GrayImage, params: &MaskParams) -> Vec<Region> {
    let (w, h) = raw.dimensions();
    let cleaned = clean(raw);
    let min_area = (params.min_area_fraction * w as f64 * h as f64).max(1.0);
    let mut out: Vec<Region> = components(&cleaned)
        .into_iter()
        .filter(|(_, n)| *n as f64 >= min_area)
        .map(|(r, _)| r.padded(params.pad_px, w, h))
        .collect();
    out.sort_by_key(Region::sort_key);
    out
}
