//! Soft-decision export and the manual-review report.

use super::yolo::{label_path, ImageEntry};
use super::OutputError;
use crate::detect::NEGATIVE_CLASS;
use crate::fuse::FusedLabel;
use crate::imaging::CropRecord;
use crate::region::Region;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Hard,
    Review,
    /// Fused class is the negative class.
    Rejected,
}

pub fn decide(l: &FusedLabel, threshold: f64) -> Decision {
    if l.class == NEGATIVE_CLASS {
        Decision::Rejected
    } else if l.combined_prob >= threshold {
        Decision::Hard
    } else {
        Decision::Review
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftRecord {
    #[serde(flatten)]
    pub label: FusedLabel,
    pub decision: Decision,
}

/// One line-delimited file per image holding every fused label with its
/// contributors; images without labels get an empty file.
pub fn export_soft(labels: &[FusedLabel], threshold: f64, images: &[ImageEntry], dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let mut by_image: BTreeMap<&str, Vec<SoftRecord>> = BTreeMap::new();
    for l in labels {
        by_image.entry(&l.image_id).or_default().push(SoftRecord {
            label: l.clone(),
            decision: decide(l, threshold),
        });
    }
    let mut written = Vec::new();
    for img in images {
        let path = dir.join(label_path(&img.image_id)).with_extension("jsonl");
        let recs = by_image.remove(img.image_id.as_str()).unwrap_or_default();
        crate::jsonl::write(&path, &recs).map_err(|e| OutputError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        written.push(path);
    }
    if let Some(id) = by_image.keys().next() {
        return Err(OutputError::MissingDims(id.to_string()));
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_id: String,
    pub class: String,
    pub combined_prob: f64,
    pub region: Region,
    /// Crop files (relative to the run directory) overlapping the label.
    pub crops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub band: [f64; 2],
    pub items: Vec<ReviewItem>,
}

/// Images whose best non-negative label has a probability inside the
/// closed band `[lo, hi]`.
pub fn make_review_report(labels: &[FusedLabel], band: [f64; 2], crops: &[CropRecord]) -> Result<ReviewReport, OutputError> {
    let [lo, hi] = band;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(OutputError::BadBand(lo, hi));
    }
    let mut best: BTreeMap<&str, &FusedLabel> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.class != NEGATIVE_CLASS) {
        let e = best.entry(&l.image_id).or_insert(l);
        if l.combined_prob > e.combined_prob {
            *e = l;
        }
    }
    let items = best
        .into_values()
        .filter(|l| (lo..=hi).contains(&l.combined_prob))
        .map(|l| ReviewItem {
            image_id: l.image_id.clone(),
            class: l.class.clone(),
            combined_prob: l.combined_prob,
            region: l.region.clone(),
            crops: crops
                .iter()
                .filter(|c| c.parent_image_id == l.image_id && c.region.intersection_area(&l.region) > 0)
                .map(|c| c.file.clone())
                .collect(),
        })
        .collect();
    Ok(ReviewReport { band, items })
}

impl ReviewReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "# Labels for manual review\n\nCombined probability in [{}, {}]: {} image(s).\n\n| image | class | probability | box | crops |\n|---|---|---|---|---|\n",
            self.band[0],
            self.band[1],
            self.items.len()
        );
        for i in &self.items {
            let crops: Vec<String> = i.crops.iter().map(|c| format!("![]({c})")).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {},{},{},{} | {} |",
                i.image_id,
                i.class,
                i.combined_prob,
                i.region.x,
                i.region.y,
                i.region.w,
                i.region.h,
                crops.join(" ")
            );
        }
        s
    }
}
