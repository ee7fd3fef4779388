//! Sub-image extraction with the offset/scale needed to map back.

use crate::region::{Frame, Region};
use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Where a crop's region came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropOrigin {
    Segmenter { segmenter: String },
    Detector { model_id: String },
}

/// One crop written to disk. `region` is in the parent's original frame;
/// `frame` is the crop-local frame that detections on the crop carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_id: String,
    pub parent_image_id: String,
    /// Relative to the run directory.
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub region: Region,
    pub frame: Frame,
    pub origin: CropOrigin,
}

/// Scale applied to a `w`×`h` crop so its long side does not exceed
/// `target_long_side`. Never upscales.
pub fn crop_scale(w: u32, h: u32, target_long_side: Option<u32>) -> f64 {
    match target_long_side {
        Some(t) if w.max(h) > t && t > 0 => t as f64 / w.max(h) as f64,
        _ => 1.0,
    }
}

/// Cuts `region` out of `img`, resizing when the long side exceeds
/// `target_long_side`. Returns the crop and its crop-local frame.
pub fn extract_crop(img: &RgbImage, parent_image_id: &str, region: &Region, target_long_side: Option<u32>) -> (RgbImage, Frame) {
    let view = imageops::crop_imm(img, region.x, region.y, region.w, region.h).to_image();
    let scale = crop_scale(region.w, region.h, target_long_side);
    let frame = Frame::Crop {
        parent_image_id: parent_image_id.to_string(),
        offset_x: region.x,
        offset_y: region.y,
        scale,
    };
    if scale == 1.0 {
        return (view, frame);
    }
    let nw = ((region.w as f64 * scale).round() as u32).max(1);
    let nh = ((region.h as f64 * scale).round() as u32).max(1);
    (imageops::resize(&view, nw, nh, FilterType::Triangle), frame)
}

/// Batch form over several regions of one image.
pub fn extract_crops(img: &RgbImage, parent_image_id: &str, regions: &[Region], target_long_side: Option<u32>) -> Vec<(RgbImage, Frame)> {
    regions
        .iter()
        .map(|r| extract_crop(img, parent_image_id, r, target_long_side))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn full_frame_crop_is_identical() {
        let img = gradient(64, 48);
        let (crop, frame) = extract_crop(&img, "a", &Region::new(0, 0, 64, 48), None);
        assert_eq!(crop, img);
        assert_eq!(
            frame,
            Frame::Crop {
                parent_image_id: "a".into(),
                offset_x: 0,
                offset_y: 0,
                scale: 1.0
            }
        );
    }

    #[test]
    fn direct_slice() {
        let img = gradient(500, 400);
        let (crop, frame) = extract_crop(&img, "a", &Region::new(100, 200, 300, 150), None);
        assert_eq!(crop.dimensions(), (300, 150));
        assert_eq!(crop.get_pixel(0, 0), img.get_pixel(100, 200));
        assert_eq!(crop.get_pixel(299, 149), img.get_pixel(399, 349));
        assert!(matches!(frame, Frame::Crop { offset_x: 100, offset_y: 200, .. }));
    }

    #[test]
    fn long_crop_is_downscaled() {
        let img = gradient(2100, 300);
        let (crop, frame) = extract_crop(&img, "a", &Region::new(50, 0, 2000, 250), Some(640));
        let Frame::Crop { scale, .. } = frame else { panic!() };
        assert!((scale - 640.0 / 2000.0).abs() < 1e-12);
        assert_eq!(crop.dimensions(), (640, 80));
        // small crops are never upscaled
        let (_, f) = extract_crop(&img, "a", &Region::new(0, 0, 100, 100), Some(640));
        assert!(matches!(f, Frame::Crop { scale, .. } if scale == 1.0));
    }

    #[test]
    fn crops_reencode_losslessly() {
        let img = gradient(80, 60);
        let (crop, _) = extract_crop(&img, "a", &Region::new(5, 7, 30, 20), None);
        let mut buf = Vec::new();
        crop.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png).unwrap();
        let back = image::load_from_memory(&buf).unwrap().to_rgb8();
        assert_eq!(back, crop);
    }
}
