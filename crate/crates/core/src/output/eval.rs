use crate::ingest::{DayNight, ImageRecord};
use crate::region::{iou, Region};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::ops::Add;

/// A labelled box, either predicted (with its score) or ground truth
/// (score 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBox {
    pub class: String,
    pub region: Region,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchOutcome {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// (prediction index, truth index)
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching: predictions in descending score order each
/// take the unmatched truth with the highest IoU, provided it is ≥ `alpha`.
pub fn match_detections(preds: &[(Region, f64)], truths: &[Region], alpha: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if taken[t] {
                continue;
            }
            let v = iou(&preds[p].0, truth);
            if v >= alpha && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        if let Some((t, _)) = best {
            taken[t] = true;
            pairs.push((p, t));
        }
    }
    let tp = pairs.len() as u64;
    MatchOutcome {
        tp,
        fp: preds.len() as u64 - tp,
        fn_: truths.len() as u64 - tp,
        pairs,
    }
}

/// Matches within each class separately; a box of the wrong class never
/// counts as a hit.
pub fn match_labels(preds: &[LabelBox], truths: &[LabelBox], alpha: f64) -> Counts {
    let classes: BTreeSet<&str> = preds.iter().chain(truths).map(|b| b.class.as_str()).collect();
    classes
        .into_iter()
        .map(|c| {
            let p: Vec<(Region, f64)> = preds
                .iter()
                .filter(|b| b.class == c)
                .map(|b| (b.region.clone(), b.score))
                .collect();
            let t: Vec<Region> = truths.iter().filter(|b| b.class == c).map(|b| b.region.clone()).collect();
            let m = match_detections(&p, &t, alpha);
            Counts { tp: m.tp, fp: m.fp, fn_: m.fn_ }
        })
        .fold(Counts::default(), Add::add)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Precision, recall and F1 from counts; any zero denominator yields 0.
pub fn compute_report(c: Counts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        precision,
        recall,
        f1,
    }
}

/// Restricts evaluation to images whose metadata matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageFilter {
    Day,
    Night,
    Keyword(String),
}

impl ImageFilter {
    pub fn matches(&self, r: &ImageRecord) -> bool {
        match self {
            ImageFilter::Day => r.day_night == DayNight::Day,
            ImageFilter::Night => r.day_night == DayNight::Night,
            ImageFilter::Keyword(k) => r.keywords.contains(k),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ImageFilter::Day => "day".into(),
            ImageFilter::Night => "night".into(),
            ImageFilter::Keyword(k) => format!("keyword={k}"),
        }
    }
}

impl std::str::FromStr for ImageFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "day" => Ok(Self::Day),
            "night" => Ok(Self::Night),
            _ => match s.strip_prefix("keyword=") {
                Some(k) if !k.is_empty() => Ok(Self::Keyword(k.to_string())),
                _ => Err(format!("unknown filter {s:?}; expected day, night or keyword=<k>")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Day/night and per-keyword breakdowns, present when image metadata
    /// was supplied.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub conditions: BTreeMap<String, Metrics>,
}

/// Scores predictions against ground truth over the union of images in
/// both sets. With `records`, images are restricted to those matching
/// every filter and per-condition breakdowns are added.
pub fn evaluate(
    preds: &BTreeMap<String, Vec<LabelBox>>,
    truths: &BTreeMap<String, Vec<LabelBox>>,
    alpha: f64,
    records: Option<&BTreeMap<String, ImageRecord>>,
    filters: &[ImageFilter],
) -> EvalReport {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let ids: BTreeSet<&String> = preds.keys().chain(truths.keys()).collect();
    let ids: Vec<&String> = ids
        .into_iter()
        .filter(|id| {
            filters.is_empty() || records.and_then(|r| r.get(*id)).is_some_and(|r| filters.iter().all(|f| f.matches(r)))
        })
        .collect();
    let empty = Vec::new();
    let per_image: Vec<(&String, Counts)> = ids
        .par_iter()
        .map(|id| {
            let p = preds.get(*id).unwrap_or(&empty);
            let t = truths.get(*id).unwrap_or(&empty);
            (*id, match_labels(p, t, alpha))
        })
        .collect();
    let total = per_image.iter().map(|(_, c)| *c).fold(Counts::default(), Add::add);

    let mut conditions: BTreeMap<String, Counts> = BTreeMap::new();
    if let Some(records) = records {
        for (id, c) in &per_image {
            let Some(r) = records.get(*id) else { continue };
            let mut keys = vec![if r.day_night == DayNight::Day { "day".to_string() } else { "night".to_string() }];
            keys.extend(r.keywords.iter().map(|k| format!("keyword={k}")));
            for k in keys {
                let e = conditions.entry(k).or_default();
                *e = *e + *c;
            }
        }
    }
    EvalReport {
        alpha,
        images: per_image.len(),
        metrics: compute_report(total),
        conditions: conditions.into_iter().map(|(k, c)| (k, compute_report(c))).collect(),
    }
}
