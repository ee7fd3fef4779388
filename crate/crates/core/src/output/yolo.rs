//! YOLO-style label files: `<class> <cx> <cy> <w> <h> [conf]`, normalised
//! by image size, six decimals, one file per image.

use super::eval::LabelBox;
use super::OutputError;
use crate::fuse::FusedLabel;
use crate::region::Region;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const IMAGE_LIST: &str = "images.txt";
pub const CLASS_LIST: &str = "classes.txt";

/// An image known to the exporter: id and pixel dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

/// Label file path for an image, relative to the label directory: the
/// image id with its extension replaced by `.txt`.
pub fn label_path(image_id: &str) -> PathBuf {
    Path::new(image_id).with_extension("txt")
}

pub fn yolo_line(class_idx: usize, r: &Region, img_w: u32, img_h: u32, conf: Option<f64>) -> String {
    let (w, h) = (img_w as f64, img_h as f64);
    let mut s = format!(
        "{class_idx} {:.6} {:.6} {:.6} {:.6}",
        (r.x as f64 + r.w as f64 / 2.0) / w,
        (r.y as f64 + r.h as f64 / 2.0) / h,
        r.w as f64 / w,
        r.h as f64 / h
    );
    if let Some(c) = conf {
        let _ = write!(s, " {c:.6}");
    }
    s
}

/// Parses one label line back into pixel coordinates.
pub fn parse_yolo_line(line: &str, img_w: u32, img_h: u32) -> Result<(usize, Region, Option<f64>), String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 5 && f.len() != 6 {
        return Err(format!("expected 5 or 6 fields, found {}", f.len()));
    }
    let class: usize = f[0].parse().map_err(|_| format!("bad class index {:?}", f[0]))?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
    let (cx, cy, bw, bh) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
    let conf = f.get(5).map(|s| num(s)).transpose()?;
    let (w, h) = (img_w as f64, img_h as f64);
    let region = Region::from_corners_clamped(
        ((cx - bw / 2.0) * w).round(),
        ((cy - bh / 2.0) * h).round(),
        ((cx + bw / 2.0) * w).round(),
        ((cy + bh / 2.0) * h).round(),
        img_w,
        img_h,
    )
    .ok_or_else(|| "box has no area inside the image".to_string())?;
    Ok((class, region, conf))
}

/// Writes one label file per image (empty when the image has no labels),
/// plus `classes.txt` and `images.txt`. Returns the label files in image
/// order.
pub fn export_yolo(
    labels: &[FusedLabel],
    classes: &[String],
    images: &[ImageEntry],
    dir: &Path,
    with_confidence: bool,
) -> Result<Vec<PathBuf>, OutputError> {
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut by_image: BTreeMap<&str, Vec<&FusedLabel>> = BTreeMap::new();
    for l in labels {
        by_image.entry(&l.image_id).or_default().push(l);
    }
    let dims: BTreeMap<&str, &ImageEntry> = images.iter().map(|e| (e.image_id.as_str(), e)).collect();
    if let Some(id) = by_image.keys().find(|id| !dims.contains_key(*id)) {
        return Err(OutputError::MissingDims(id.to_string()));
    }
    let io = |p: &Path, e: std::io::Error| OutputError::Io {
        path: p.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut written = Vec::new();
    for img in images {
        let mut text = String::new();
        let mut ls = by_image.get(img.image_id.as_str()).cloned().unwrap_or_default();
        ls.sort_by_key(|l| l.region.sort_key());
        for l in ls {
            let idx = *index.get(l.class.as_str()).ok_or_else(|| OutputError::UnknownClass {
                class: l.class.clone(),
                image_id: l.image_id.clone(),
            })?;
            text.push_str(&yolo_line(idx, &l.region, img.width, img.height, with_confidence.then_some(l.combined_prob)));
            text.push('\n');
        }
        let path = dir.join(label_path(&img.image_id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        crate::jsonl::write_atomic(&path, text.as_bytes()).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    write_lists(dir, classes, images)?;
    Ok(written)
}

fn write_lists(dir: &Path, classes: &[String], images: &[ImageEntry]) -> Result<(), OutputError> {
    let mut cls = String::new();
    for c in classes {
        cls.push_str(c);
        cls.push('\n');
    }
    let mut imgs = String::new();
    for e in images {
        let _ = writeln!(imgs, "{} {} {}", e.width, e.height, e.image_id);
    }
    for (name, body) in [(CLASS_LIST, cls), (IMAGE_LIST, imgs)] {
        let p = dir.join(name);
        crate::jsonl::write_atomic(&p, body.as_bytes()).map_err(|e| OutputError::Io { path: p, source: e })?;
    }
    Ok(())
}

/// Reads `images.txt` (`<width> <height> <image_id>` per line).
pub fn read_image_list(path: &Path) -> Result<Vec<ImageEntry>, OutputError> {
    let text = std::fs::read_to_string(path).map_err(|e| OutputError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| OutputError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: msg.to_string(),
        };
        let mut it = line.splitn(3, ' ');
        let width = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad width"))?;
        let height = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad height"))?;
        let image_id = it.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing image id"))?;
        out.push(ImageEntry {
            image_id: image_id.to_string(),
            width,
            height,
        });
    }
    Ok(out)
}

/// Loads a label directory: every image in its `images.txt` (or in
/// `images` when given) maps to its boxes. A missing label file means no
/// boxes. Class names come from `classes.txt` when present, otherwise the
/// index is used as the name. Boxes without a confidence column score 1.
pub fn read_label_dir(dir: &Path, images: Option<&[ImageEntry]>) -> Result<BTreeMap<String, Vec<LabelBox>>, OutputError> {
    let owned;
    let images = match images {
        Some(i) => i,
        None => {
            owned = read_image_list(&dir.join(IMAGE_LIST))?;
            &owned
        }
    };
    let class_path = dir.join(CLASS_LIST);
    let names: Vec<String> = if class_path.exists() {
        std::fs::read_to_string(&class_path)
            .map_err(|e| OutputError::Io {
                path: class_path.clone(),
                source: e,
            })?
            .lines()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut out = BTreeMap::new();
    for img in images {
        let path = dir.join(label_path(&img.image_id));
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(OutputError::Io { path, source: e }),
        };
        let mut boxes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (idx, region, conf) = parse_yolo_line(line, img.width, img.height).map_err(|message| OutputError::Parse {
                path: path.clone(),
                line: i + 1,
                message,
            })?;
            boxes.push(LabelBox {
                class: names.get(idx).cloned().unwrap_or_else(|| idx.to_string()),
                region,
                score: conf.unwrap_or(1.0),
            });
        }
        out.insert(img.image_id.clone(), boxes);
    }
    Ok(out)
}
