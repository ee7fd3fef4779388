//! Soft detections and the process-boundary detector adapter.

pub mod adapter;
pub mod mock;

use crate::region::Region;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub use adapter::{run_detector, AdapterSpec, DetectError, ManifestItem, RunOptions};
pub use mock::{mock_detect, serve_mock, MOCK_CLASS};

/// The class meaning "no object". Detector "background" outputs and the
/// crowd's "nothing" choice both map to it.
pub const NEGATIVE_CLASS: &str = "nothing";

/// Folds negative-class aliases onto [`NEGATIVE_CLASS`].
pub fn canonical_class(name: &str) -> &str {
    match name {
        "background" | "nothing" => NEGATIVE_CLASS,
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionSource {
    Detector { model_id: String },
    Segmenter { segmenter: String },
    Crowd,
}

impl DetectionSource {
    /// Key used to look up the source's fusion weight.
    pub fn weight_key(&self) -> &'static str {
        match self {
            DetectionSource::Detector { .. } => "detector",
            DetectionSource::Segmenter { .. } => "segmenter",
            DetectionSource::Crowd => "crowd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detection_id: String,
    pub source: DetectionSource,
    /// Image id for full frames, crop id for crops.
    pub subject: String,
    pub region: Region,
    pub class_probs: BTreeMap<String, f64>,
    pub top_class: String,
    /// Crop and group ids this detection passed through.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

/// Argmax class; equal probabilities go to the lexicographically smallest
/// name. `None` for an empty map.
pub fn top_class(probs: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    // BTreeMap iterates in name order, so strict > keeps the smallest name
    for (name, &p) in probs {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((name, p));
        }
    }
    best.map(|(n, _)| n)
}

impl Detection {
    pub fn new(detection_id: String, source: DetectionSource, subject: String, region: Region, class_probs: BTreeMap<String, f64>) -> Self {
        let top = top_class(&class_probs).unwrap_or(NEGATIVE_CLASS).to_string();
        Self {
            detection_id,
            source,
            subject,
            region,
            class_probs,
            top_class: top,
            provenance: Vec::new(),
        }
    }

    /// Deterministic merge order: subject, then region, then source.
    pub fn order_key(&self) -> (&str, (u32, u32, u32, u32), &DetectionSource, &str) {
        (&self.subject, self.region.sort_key(), &self.source, &self.detection_id)
    }
}
