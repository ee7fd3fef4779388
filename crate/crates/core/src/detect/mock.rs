//! Deterministic stand-in detector: bright blobs are "targets".

use super::adapter::{WireBox, WireRequest, WireResponse};
use image::{GrayImage, Luma, RgbImage};
use imageproc::region_labelling::{connected_components, Connectivity};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

pub const MOCK_CLASS: &str = "target";
pub const BRIGHTNESS_THRESHOLD: f64 = 200.0;
pub const MIN_AREA: u64 = 100;

fn brightness(p: &image::Rgb<u8>) -> f64 {
    (299 * p.0[0] as u32 + 587 * p.0[1] as u32 + 114 * p.0[2] as u32) as f64 / 1000.0
}

pub fn mock_probability(mean_brightness: f64) -> f64 {
    (0.5 + 0.4 * (mean_brightness - BRIGHTNESS_THRESHOLD) / 55.0).clamp(0.5, 0.9)
}

/// Boxes around 8-connected regions of pixels brighter than 200 with at
/// least 100 pixels, each labelled `target` with a probability rising
/// linearly with mean brightness. Sorted by (y, x).
pub fn mock_detect(img: &RgbImage) -> Vec<WireBox> {
    let bright = GrayImage::from_fn(img.width(), img.height(), |x, y| {
        Luma([if brightness(img.get_pixel(x, y)) > BRIGHTNESS_THRESHOLD { 255 } else { 0 }])
    });
    let labels = connected_components(&bright, Connectivity::Eight, Luma([0u8]));
    // (x0, y0, x1, y1, count, brightness sum)
    let mut acc: BTreeMap<u32, (u32, u32, u32, u32, u64, f64)> = BTreeMap::new();
    for (x, y, l) in labels.enumerate_pixels() {
        let l = l.0[0];
        if l == 0 {
            continue;
        }
        let e = acc.entry(l).or_insert((x, y, x, y, 0, 0.0));
        e.0 = e.0.min(x);
        e.1 = e.1.min(y);
        e.2 = e.2.max(x);
        e.3 = e.3.max(y);
        e.4 += 1;
        e.5 += brightness(img.get_pixel(x, y));
    }
    let mut boxes: Vec<WireBox> = acc
        .into_values()
        .filter(|e| e.4 >= MIN_AREA)
        .map(|(x0, y0, x1, y1, n, sum)| {
            let p = mock_probability(sum / n as f64);
            WireBox {
                x: x0 as i64,
                y: y0 as i64,
                w: (x1 - x0 + 1) as i64,
                h: (y1 - y0 + 1) as i64,
                probs: BTreeMap::from([(MOCK_CLASS.to_string(), p), ("background".to_string(), 1.0 - p)]),
            }
        })
        .collect();
    boxes.sort_by_key(|b| (b.y, b.x));
    boxes
}

/// Speaks the adapter protocol: one response line per request line.
/// Unreadable images get an empty box list and a note on stderr.
pub fn serve_mock<R: BufRead, W: Write>(input: R, mut output: W) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: WireRequest = serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let boxes = match image::open(&req.path) {
            Ok(img) => mock_detect(&img.to_rgb8()),
            Err(e) => {
                eprintln!("mock-detector: {}: {e}", req.path);
                Vec::new()
            }
        };
        serde_json::to_writer(&mut output, &WireResponse { id: req.id, boxes })?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
