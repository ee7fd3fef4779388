//! Backmapping crop detections to source images and weighted-mean fusion
//! of overlapping soft decisions.

use crate::crowd::VoteTally;
use crate::dedup::DedupGroup;
use crate::detect::{canonical_class, Detection, DetectionSource, NEGATIVE_CLASS};
use crate::imaging::CropRecord;
use crate::region::{iou, Frame, Region};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_MERGE_IOU: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FuseError {
    #[error("fusion weights invalid: {0}")]
    Weight(String),
    #[error("probability {value} for class {class:?} from {detection_id} outside [0, 1]")]
    Range {
        detection_id: String,
        class: String,
        value: f64,
    },
    #[error("detection {detection_id} references unknown crop {crop_id:?}")]
    OrphanCrop { detection_id: String, crop_id: String },
    #[error("no dimensions known for image {0:?}")]
    UnknownImage(String),
}

/// Per-source fusion weights keyed by source kind (`crowd`, `detector`,
/// `segmenter`). Must sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct DetectorWeights(BTreeMap<String, f64>);

impl DetectorWeights {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self, FuseError> {
        if weights.is_empty() {
            return Err(FuseError::Weight("no sources configured".into()));
        }
        for (k, w) in &weights {
            if !(0.0..=1.0).contains(w) {
                return Err(FuseError::Weight(format!("weight {w} for {k:?} outside [0, 1]")));
            }
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(FuseError::Weight(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }
}

impl Default for DetectorWeights {
    fn default() -> Self {
        Self(BTreeMap::from([("crowd".to_string(), 0.6), ("detector".to_string(), 0.4)]))
    }
}

impl TryFrom<BTreeMap<String, f64>> for DetectorWeights {
    type Error = FuseError;
    fn try_from(m: BTreeMap<String, f64>) -> Result<Self, FuseError> {
        Self::new(m)
    }
}

impl From<DetectorWeights> for BTreeMap<String, f64> {
    fn from(w: DetectorWeights) -> Self {
        w.0
    }
}

/// Which classes enter the weighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Each detection contributes only its top class.
    #[default]
    TopClass,
    /// Each detection contributes its full probability map.
    AllClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub detection_id: String,
    pub source: DetectionSource,
    /// This detection's probability for the fused label's class.
    pub prob: f64,
    /// Effective weight after renormalisation and same-source splitting.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedLabel {
    pub image_id: String,
    pub region: Region,
    pub class: String,
    pub combined_prob: f64,
    pub class_probs: BTreeMap<String, f64>,
    pub contributors: Vec<Contributor>,
}

/// Maps a crop-local box to the crop's parent frame:
/// `x' = offset_x + x / scale` (likewise for y, w, h), rounded and clamped.
pub fn crop_to_original(r: &Region, frame_w: u32, frame_h: u32) -> Region {
    let Frame::Crop { offset_x, offset_y, scale, .. } = &r.frame else {
        return r.clone();
    };
    let x = (*offset_x as f64 + r.x as f64 / scale).round();
    let y = (*offset_y as f64 + r.y as f64 / scale).round();
    let w = (r.w as f64 / scale).round().max(1.0);
    let h = (r.h as f64 / scale).round().max(1.0);
    clamp_box(x, y, w, h, frame_w, frame_h)
}

fn clamp_box(x: f64, y: f64, w: f64, h: f64, frame_w: u32, frame_h: u32) -> Region {
    let x = x.clamp(0.0, frame_w.saturating_sub(1) as f64) as u32;
    let y = y.clamp(0.0, frame_h.saturating_sub(1) as f64) as u32;
    let w = (w as u32).clamp(1, frame_w - x);
    let h = (h as u32).clamp(1, frame_h - y);
    Region::new(x, y, w, h)
}

/// Transfers a box from one crop to the same relative position in another
/// crop of the group, expressed in the target's parent frame.
fn transfer(r: &Region, from: &CropRecord, to: &CropRecord, frame_w: u32, frame_h: u32) -> Region {
    let fx = to.region.w as f64 / from.width as f64;
    let fy = to.region.h as f64 / from.height as f64;
    clamp_box(
        (to.region.x as f64 + r.x as f64 * fx).round(),
        (to.region.y as f64 + r.y as f64 * fy).round(),
        (r.w as f64 * fx).round().max(1.0),
        (r.h as f64 * fy).round().max(1.0),
        frame_w,
        frame_h,
    )
}

/// Brings every detection into its source image's frame. Detections on a
/// crop are copied to every member of the crop's dedup group (a crop in no
/// group stands alone); each copy records the crop and group it came
/// through. Output is ordered by (image, region, source).
pub fn backmap(
    detections: &[Detection],
    crops: &BTreeMap<String, CropRecord>,
    groups: &[DedupGroup],
    dims: &BTreeMap<String, (u32, u32)>,
) -> Result<Vec<Detection>, FuseError> {
    let mut group_of: BTreeMap<&str, &DedupGroup> = BTreeMap::new();
    for g in groups {
        for m in &g.members {
            group_of.insert(m.as_str(), g);
        }
    }
    let mut out = Vec::new();
    for d in detections {
        if d.region.frame.is_original() {
            out.push(d.clone());
            continue;
        }
        let orphan = || FuseError::OrphanCrop {
            detection_id: d.detection_id.clone(),
            crop_id: d.subject.clone(),
        };
        let crop = crops.get(&d.subject).ok_or_else(orphan)?;
        let (members, group_id): (Vec<&str>, Option<&str>) = match group_of.get(d.subject.as_str()) {
            Some(g) => (g.members.iter().map(String::as_str).collect(), Some(&g.group_id)),
            None => (vec![d.subject.as_str()], None),
        };
        for m in members {
            let target = crops.get(m).ok_or_else(orphan)?;
            let (fw, fh) = *dims
                .get(&target.parent_image_id)
                .ok_or_else(|| FuseError::UnknownImage(target.parent_image_id.clone()))?;
            let region = if m == d.subject {
                crop_to_original(&d.region, fw, fh)
            } else {
                transfer(&d.region, crop, target, fw, fh)
            };
            let mut copy = d.clone();
            copy.detection_id = if m == d.subject {
                d.detection_id.clone()
            } else {
                format!("{}@{m}", d.detection_id)
            };
            copy.subject = target.parent_image_id.clone();
            copy.region = region;
            copy.provenance.push(format!("crop:{}", d.subject));
            if let Some(g) = group_id {
                copy.provenance.push(format!("group:{g}"));
            }
            if m != d.subject {
                copy.provenance.push(format!("member:{m}"));
            }
            out.push(copy);
        }
    }
    out.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    Ok(out)
}

/// Crowd evidence as detections covering the whole voted crop. Incomplete
/// tallies are held back; tallies for unknown crops are errors.
pub fn crowd_detections(tallies: &[VoteTally], crops: &BTreeMap<String, CropRecord>) -> Result<Vec<Detection>, FuseError> {
    let mut out = Vec::new();
    for t in tallies {
        let crop = crops.get(&t.crop_id).ok_or_else(|| FuseError::OrphanCrop {
            detection_id: t.task_id.clone(),
            crop_id: t.crop_id.clone(),
        })?;
        if !t.complete || t.total_votes == 0 {
            continue;
        }
        let region = Region::new(0, 0, crop.width, crop.height).with_frame(crop.frame.clone());
        out.push(Detection::new(
            format!("crowd:{}", t.crop_id),
            DetectionSource::Crowd,
            t.crop_id.clone(),
            region,
            t.fractions.clone(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub region: Region,
    /// Indices into the input slice, ascending.
    pub members: Vec<usize>,
}

/// Greedy agglomeration: repeatedly joins the two clusters whose boxes
/// overlap most, while that overlap is at least `merge_iou`. A cluster's
/// box is the union of its members' boxes.
pub fn merge_regions(detections: &[Detection], merge_iou: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = detections
        .iter()
        .enumerate()
        .map(|(i, d)| Cluster {
            region: d.region.clone(),
            members: vec![i],
        })
        .collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let v = iou(&clusters[i].region, &clusters[j].region);
                if v >= merge_iou && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        let absorbed = clusters.remove(j);
        let c = &mut clusters[i];
        c.region = c.region.bounding_union(&absorbed.region);
        c.members.extend(absorbed.members);
        c.members.sort_unstable();
    }
    clusters
}

fn class_vector(d: &Detection, mode: FusionMode) -> BTreeMap<String, f64> {
    match mode {
        FusionMode::TopClass => {
            let p = d.class_probs.get(&d.top_class).copied().unwrap_or(0.0);
            BTreeMap::from([(canonical_class(&d.top_class).to_string(), p)])
        }
        FusionMode::AllClasses => {
            let mut m = BTreeMap::new();
            for (k, &p) in &d.class_probs {
                let e = m.entry(canonical_class(k).to_string()).or_insert(0.0);
                *e = f64::max(*e, p);
            }
            m
        }
    }
}

/// Argmax with the lexicographically smallest class winning ties.
fn argmax(probs: &BTreeMap<String, f64>) -> Option<(&String, f64)> {
    probs
        .iter()
        .fold(None, |best: Option<(&String, f64)>, (k, &p)| match best {
            Some((_, b)) if b >= p => best,
            _ => Some((k, p)),
        })
}

/// Weighted arithmetic mean over the cluster's detections.
///
/// Each weighted source present in the cluster gets its configured weight,
/// renormalised over the present sources; a source with `n` detections in
/// the cluster splits its weight evenly among them. A class missing from a
/// present detection counts as 0. Sources without a configured weight
/// shape the geometry only. Returns `None` when no weighted evidence is
/// present.
pub fn fuse_cluster(
    image_id: &str,
    region: &Region,
    members: &[&Detection],
    weights: &DetectorWeights,
    mode: FusionMode,
) -> Result<Option<FusedLabel>, FuseError> {
    for d in members {
        for (class, &p) in &d.class_probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(FuseError::Range {
                    detection_id: d.detection_id.clone(),
                    class: class.clone(),
                    value: p,
                });
            }
        }
    }
    let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
    for d in members {
        if weights.get(d.source.weight_key()).is_some() {
            *per_source.entry(d.source.weight_key()).or_insert(0) += 1;
        }
    }
    let total: f64 = per_source.keys().map(|k| weights.get(k).unwrap_or(0.0)).sum();
    if total <= 0.0 {
        return Ok(None);
    }

    let mut fused: BTreeMap<String, f64> = BTreeMap::new();
    let mut weighted: Vec<(&Detection, f64, BTreeMap<String, f64>)> = Vec::new();
    for d in members {
        let key = d.source.weight_key();
        let Some(w) = weights.get(key) else { continue };
        let eff = w / total / per_source[key] as f64;
        let v = class_vector(d, mode);
        for (c, p) in &v {
            *fused.entry(c.clone()).or_insert(0.0) += eff * p;
        }
        weighted.push((d, eff, v));
    }
    let Some((class, prob)) = argmax(&fused).map(|(c, p)| (c.clone(), p)) else {
        return Ok(None);
    };
    let contributors = weighted
        .into_iter()
        .map(|(d, eff, v)| Contributor {
            detection_id: d.detection_id.clone(),
            source: d.source.clone(),
            prob: v.get(&class).copied().unwrap_or(0.0),
            weight: eff,
        })
        .collect();
    Ok(Some(FusedLabel {
        image_id: image_id.to_string(),
        region: region.clone(),
        class,
        combined_prob: prob,
        class_probs: fused,
        contributors,
    }))
}

/// Merges and fuses every image's backmapped detections. Output is
/// ordered by (image, region).
pub fn fuse_all(
    backmapped: &[Detection],
    weights: &DetectorWeights,
    merge_iou: f64,
    mode: FusionMode,
) -> Result<Vec<FusedLabel>, FuseError> {
    let mut by_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in backmapped {
        by_image.entry(d.subject.as_str()).or_default().push(d);
    }
    let per_image: Vec<Result<Vec<FusedLabel>, FuseError>> = by_image
        .par_iter()
        .map(|(image_id, dets)| {
            let owned: Vec<Detection> = dets.iter().map(|d| (*d).clone()).collect();
            let mut out = Vec::new();
            for c in merge_regions(&owned, merge_iou) {
                let members: Vec<&Detection> = c.members.iter().map(|&i| dets[i]).collect();
                if let Some(l) = fuse_cluster(image_id, &c.region, &members, weights, mode)? {
                    out.push(l);
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    all.sort_by(|a, b| (&a.image_id, a.region.sort_key()).cmp(&(&b.image_id, b.region.sort_key())));
    Ok(all)
}

/// Splits labels into hard labels (`combined_prob >= threshold`) and
/// review candidates (below it). Labels whose class is the negative class
/// are in neither.
pub fn apply_threshold(labels: &[FusedLabel], threshold: f64) -> (Vec<FusedLabel>, Vec<FusedLabel>) {
    let mut hard = Vec::new();
    let mut review = Vec::new();
    for l in labels {
        if l.class == NEGATIVE_CLASS {
            continue;
        }
        if l.combined_prob >= threshold {
            hard.push(l.clone());
        } else {
            review.push(l.clone());
        }
    }
    (hard, review)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::CropOrigin;
    use proptest::prelude::*;

    fn det(id: &str, source: DetectionSource, region: Region, probs: &[(&str, f64)]) -> Detection {
        Detection::new(
            id.into(),
            source,
            "img".into(),
            region,
            probs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
    }

    fn detector() -> DetectionSource {
        DetectionSource::Detector { model_id: "m".into() }
    }

    fn crop_frame(ox: u32, oy: u32, scale: f64) -> Frame {
        Frame::Crop {
            parent_image_id: "img".into(),
            offset_x: ox,
            offset_y: oy,
            scale,
        }
    }

    fn crop(id: &str, region: Region, scale: f64) -> CropRecord {
        CropRecord {
            crop_id: id.into(),
            parent_image_id: "img".into(),
            file: format!("crops/{id}.png"),
            width: (region.w as f64 * scale).round() as u32,
            height: (region.h as f64 * scale).round() as u32,
            frame: crop_frame(region.x, region.y, scale),
            region,
            origin: CropOrigin::Segmenter { segmenter: "mog2".into() },
        }
    }

    #[test]
    fn crop_transform_examples() {
        let r = Region::new(10, 20, 30, 40).with_frame(crop_frame(0, 0, 1.0));
        assert_eq!(crop_to_original(&r, 1000, 1000), Region::new(10, 20, 30, 40));
        let r = Region::new(10, 20, 30, 40).with_frame(crop_frame(100, 200, 1.0));
        assert_eq!(crop_to_original(&r, 1000, 1000), Region::new(110, 220, 30, 40));
        let r = Region::new(10, 10, 20, 20).with_frame(crop_frame(50, 60, 0.5));
        assert_eq!(crop_to_original(&r, 1000, 1000), Region::new(70, 80, 40, 40));
    }

    #[test]
    fn crowd_and_detector_fusion() {
        let w = DetectorWeights::default();
        let r = Region::new(0, 0, 10, 10);
        let a = det("c", DetectionSource::Crowd, r.clone(), &[("wolf", 1.0)]);
        let b = det("d", detector(), r.clone(), &[("wolf", 0.908), ("background", 0.092)]);
        let l = fuse_cluster("img", &r, &[&a, &b], &w, FusionMode::TopClass).unwrap().unwrap();
        assert_eq!(l.class, "wolf");
        assert!((l.combined_prob - 0.9632).abs() < 1e-9);
        let l = fuse_cluster("img", &r, &[&det("c", DetectionSource::Crowd, r.clone(), &[("wolf", 0.67), ("nothing", 0.33)])], &w, FusionMode::TopClass)
            .unwrap()
            .unwrap();
        assert!((l.combined_prob - 0.67).abs() < 1e-9);
        assert_eq!(l.contributors[0].weight, 1.0);
    }

    #[test]
    fn equal_weights_equal_inputs() {
        let w = DetectorWeights::new(BTreeMap::from([("crowd".into(), 0.5), ("detector".into(), 0.5)])).unwrap();
        let r = Region::new(0, 0, 5, 5);
        let a = det("c", DetectionSource::Crowd, r.clone(), &[("wolf", 0.7)]);
        let b = det("d", detector(), r.clone(), &[("wolf", 0.7)]);
        let l = fuse_cluster("img", &r, &[&a, &b], &w, FusionMode::TopClass).unwrap().unwrap();
        assert!((l.combined_prob - 0.7).abs() < 1e-12);
    }

    #[test]
    fn same_source_splits_weight() {
        let w = DetectorWeights::default();
        let r = Region::new(0, 0, 5, 5);
        let a = det("c", DetectionSource::Crowd, r.clone(), &[("wolf", 1.0)]);
        let b1 = det("d1", detector(), r.clone(), &[("wolf", 0.8)]);
        let b2 = det("d2", detector(), r.clone(), &[("wolf", 0.6)]);
        let l = fuse_cluster("img", &r, &[&a, &b1, &b2], &w, FusionMode::TopClass).unwrap().unwrap();
        assert!((l.combined_prob - (0.6 + 0.2 * 0.8 + 0.2 * 0.6)).abs() < 1e-12);
        let ws: Vec<f64> = l.contributors.iter().map(|c| c.weight).collect();
        assert_eq!(ws, vec![0.6, 0.2, 0.2]);
    }

    #[test]
    fn weight_and_range_errors() {
        assert!(DetectorWeights::new(BTreeMap::from([("crowd".into(), 0.6), ("detector".into(), 0.5)])).is_err());
        assert!(DetectorWeights::new(BTreeMap::new()).is_err());
        assert!(serde_json::from_str::<DetectorWeights>(r#"{"crowd": 0.7, "detector": 0.4}"#).is_err());
        let r = Region::new(0, 0, 5, 5);
        let bad = det("x", detector(), r.clone(), &[("wolf", 1.5)]);
        assert!(matches!(
            fuse_cluster("img", &r, &[&bad], &DetectorWeights::default(), FusionMode::TopClass),
            Err(FuseError::Range { .. })
        ));
    }

    #[test]
    fn unweighted_sources_are_geometry_only() {
        let r = Region::new(0, 0, 5, 5);
        let s = det("s", DetectionSource::Segmenter { segmenter: "mog2".into() }, r.clone(), &[("wolf", 1.0)]);
        assert_eq!(fuse_cluster("img", &r, &[&s], &DetectorWeights::default(), FusionMode::TopClass).unwrap(), None);
    }

    #[test]
    fn crowd_negative_vote_wins_over_weak_detector() {
        let r = Region::new(0, 0, 5, 5);
        let c = det("c", DetectionSource::Crowd, r.clone(), &[("nothing", 0.857143), ("wolf", 0.142857)]);
        let d = det("d", detector(), r.clone(), &[("wolf", 0.55), ("background", 0.45)]);
        let l = fuse_cluster("img", &r, &[&c, &d], &DetectorWeights::default(), FusionMode::AllClasses)
            .unwrap()
            .unwrap();
        assert_eq!(l.class, "nothing");
        let (hard, review) = apply_threshold(&[l], 0.5);
        assert!(hard.is_empty() && review.is_empty());
    }

    #[test]
    fn merge_examples() {
        let d = |id: &str, r: Region| det(id, detector(), r, &[("wolf", 0.9)]);
        let same = merge_regions(&[d("a", Region::new(0, 0, 10, 10)), d("b", Region::new(0, 0, 10, 10))], 0.5);
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].region, Region::new(0, 0, 10, 10));
        let apart = merge_regions(&[d("a", Region::new(0, 0, 10, 10)), d("b", Region::new(50, 50, 10, 10))], 0.5);
        assert_eq!(apart.len(), 2);
        // inner 11x10 box inside a 20x10 box: IoU 110/200 = 0.55
        let outer = Region::new(100, 100, 20, 10);
        let inner = Region::new(104, 100, 11, 10);
        assert!((iou(&outer, &inner) - 0.55).abs() < 1e-12);
        let nested = merge_regions(&[d("seg", outer.clone()), d("det", inner)], 0.5);
        assert_eq!(nested.len(), 1);
        assert_eq!(nested[0].region, outer);
        assert_eq!(nested[0].members, vec![0, 1]);
    }

    #[test]
    fn threshold_boundaries() {
        let mk = |p: f64| FusedLabel {
            image_id: "i".into(),
            region: Region::new(0, 0, 1, 1),
            class: "wolf".into(),
            combined_prob: p,
            class_probs: BTreeMap::new(),
            contributors: Vec::new(),
        };
        let (hard, review) = apply_threshold(&[mk(0.9632), mk(0.5), mk(0.49)], 0.5);
        assert_eq!(hard.len(), 2);
        assert_eq!(review.len(), 1);
        assert_eq!(review[0].combined_prob, 0.49);
    }

    #[test]
    fn five_duplicates_propagate() {
        let crops: BTreeMap<String, CropRecord> = (0..5)
            .map(|i| {
                let id = format!("c{i}");
                (id.clone(), crop(&id, Region::new(10 * i, 20, 40, 40), 1.0))
            })
            .collect();
        let group = DedupGroup {
            group_id: "grp-c0".into(),
            representative: "c0".into(),
            members: crops.keys().cloned().collect(),
            hash_bits: 0,
        };
        let tally = VoteTally {
            task_id: "task-c0".into(),
            crop_id: "c0".into(),
            counts: BTreeMap::from([("wolf".into(), 3)]),
            fractions: BTreeMap::from([("wolf".into(), 1.0)]),
            total_votes: 3,
            complete: true,
        };
        let crowd = crowd_detections(&[tally], &crops).unwrap();
        let dims = BTreeMap::from([("img".to_string(), (200, 100))]);
        let back = backmap(&crowd, &crops, &[group], &dims).unwrap();
        assert_eq!(back.len(), 5);
        for (i, d) in back.iter().enumerate() {
            assert_eq!(d.region, Region::new(10 * i as u32, 20, 40, 40));
            assert!(d.provenance.contains(&"group:grp-c0".to_string()));
        }
    }

    #[test]
    fn incomplete_and_orphan_tallies() {
        let crops = BTreeMap::from([("c".to_string(), crop("c", Region::new(0, 0, 10, 10), 1.0))]);
        let mut t = VoteTally {
            task_id: "task-c".into(),
            crop_id: "c".into(),
            counts: BTreeMap::from([("wolf".into(), 2)]),
            fractions: BTreeMap::from([("wolf".into(), 1.0)]),
            total_votes: 2,
            complete: false,
        };
        assert!(crowd_detections(&[t.clone()], &crops).unwrap().is_empty());
        t.crop_id = "zzz".into();
        assert!(matches!(crowd_detections(&[t], &crops), Err(FuseError::OrphanCrop { .. })));
        let d = Detection::new("d".into(), detector(), "nope".into(), Region::new(0, 0, 1, 1).with_frame(crop_frame(0, 0, 1.0)), BTreeMap::new());
        assert!(matches!(backmap(&[d], &crops, &[], &BTreeMap::new()), Err(FuseError::OrphanCrop { .. })));
    }

    fn source_strategy() -> impl Strategy<Value = DetectionSource> {
        prop_oneof![
            Just(DetectionSource::Crowd),
            Just(DetectionSource::Detector { model_id: "m".into() }),
            Just(DetectionSource::Segmenter { segmenter: "s".into() }),
        ]
    }

    fn cluster_strategy() -> impl Strategy<Value = Vec<(DetectionSource, f64, f64)>> {
        proptest::collection::vec((source_strategy(), 0.0f64..=1.0, 0.0f64..=1.0), 1..8)
    }

    fn weights3() -> DetectorWeights {
        DetectorWeights::new(BTreeMap::from([
            ("crowd".into(), 0.5),
            ("detector".into(), 0.3),
            ("segmenter".into(), 0.2),
        ]))
        .unwrap()
    }

    fn build(spec: &[(DetectionSource, f64, f64)]) -> Vec<Detection> {
        spec.iter()
            .enumerate()
            .map(|(i, (s, a, b))| det(&format!("d{i}"), s.clone(), Region::new(0, 0, 4, 4), &[("wolf", *a), ("deer", *b)]))
            .collect()
    }

    proptest! {
        #[test]
        fn effective_weights_sum_to_one(spec in cluster_strategy(), all in any::<bool>()) {
            let dets = build(&spec);
            let refs: Vec<&Detection> = dets.iter().collect();
            let mode = if all { FusionMode::AllClasses } else { FusionMode::TopClass };
            let l = fuse_cluster("img", &dets[0].region, &refs, &weights3(), mode).unwrap().unwrap();
            let s: f64 = l.contributors.iter().map(|c| c.weight).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            let mean: f64 = l.contributors.iter().map(|c| c.weight * c.prob).sum();
            prop_assert!((mean - l.combined_prob).abs() <= 1e-9);
        }

        #[test]
        fn linearity(spec in cluster_strategy(), pick in any::<prop::sample::Index>(), delta in -0.5f64..0.5) {
            let mut dets = build(&spec);
            let i = pick.index(dets.len());
            let base = dets[i].class_probs["wolf"];
            let delta = delta.clamp(-base, 1.0 - base);
            let refs: Vec<&Detection> = dets.iter().collect();
            let before = fuse_cluster("img", &dets[0].region, &refs, &weights3(), FusionMode::AllClasses).unwrap().unwrap();
            let w = before.contributors[i].weight;
            let d0 = before.class_probs["wolf"];
            dets[i].class_probs.insert("wolf".into(), base + delta);
            let refs: Vec<&Detection> = dets.iter().collect();
            let after = fuse_cluster("img", &dets[0].region, &refs, &weights3(), FusionMode::AllClasses).unwrap().unwrap();
            prop_assert!((after.class_probs["wolf"] - (d0 + w * delta)).abs() <= 1e-12);
        }

        #[test]
        fn argmax_invariant_under_common_scaling(spec in cluster_strategy(), k in 0.01f64..=1.0) {
            let dets = build(&spec);
            let refs: Vec<&Detection> = dets.iter().collect();
            let before = fuse_cluster("img", &dets[0].region, &refs, &weights3(), FusionMode::AllClasses).unwrap().unwrap();
            let scaled: Vec<Detection> = dets
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    d.class_probs.values_mut().for_each(|p| *p *= k);
                    d
                })
                .collect();
            let refs: Vec<&Detection> = scaled.iter().collect();
            let after = fuse_cluster("img", &dets[0].region, &refs, &weights3(), FusionMode::AllClasses).unwrap().unwrap();
            // exact ties can flip under rounding; only compare clear winners
            let margin = before.class_probs.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - before.class_probs.iter().filter(|(c, _)| **c != before.class).map(|(_, &p)| p).fold(f64::NEG_INFINITY, f64::max);
            if margin > 1e-9 {
                prop_assert_eq!(after.class, before.class);
            }
        }

        #[test]
        fn backmap_round_trip(x in 0u32..500, y in 0u32..400, w in 1u32..300, h in 1u32..300, ox in 0u32..200, oy in 0u32..200, scale in prop::sample::select(vec![1.0, 0.5, 0.32, 0.75, 0.9, 0.2])) {
            let (fw, fh) = (1000u32, 1000u32);
            let orig = Region::new(ox + x, oy + y, w.min(fw - ox - x), h.min(fh - oy - y));
            // forward: original -> crop-local, then back
            let local = Region::new(
                ((orig.x - ox) as f64 * scale).round() as u32,
                ((orig.y - oy) as f64 * scale).round() as u32,
                ((orig.w as f64 * scale).round() as u32).max(1),
                ((orig.h as f64 * scale).round() as u32).max(1),
            )
            .with_frame(crop_frame(ox, oy, scale));
            let back = crop_to_original(&local, fw, fh);
            // one crop pixel spans 1/scale original pixels, so the 1 px bound
            // only holds down to scale 0.5; below that the grid itself limits it
            let tol = if scale == 1.0 { 0 } else if scale >= 0.5 { 1 } else { (0.5 / scale + 0.5).floor() as u32 };
            prop_assert!(back.x.abs_diff(orig.x) <= tol && back.y.abs_diff(orig.y) <= tol);
            // a box can be no smaller than one crop pixel
            let min_side = (1.0 / scale).round() as u32;
            prop_assert!(back.w.abs_diff(orig.w) <= tol.max(min_side.saturating_sub(orig.w)));
            prop_assert!(back.h.abs_diff(orig.h) <= tol.max(min_side.saturating_sub(orig.h)));
        }

        #[test]
        fn group_expansion_conservation(sizes in proptest::collection::vec(1usize..5, 1..6), per_crop in proptest::collection::vec(0usize..3, 20)) {
            let mut crops = BTreeMap::new();
            let mut groups = Vec::new();
            let mut dets = Vec::new();
            let mut expected = 0;
            let mut k = 0;
            for (g, &n) in sizes.iter().enumerate() {
                let members: Vec<String> = (0..n).map(|m| format!("g{g}m{m}")).collect();
                for m in &members {
                    crops.insert(m.clone(), crop(m, Region::new(5, 5, 50, 40), 1.0));
                    for j in 0..per_crop[k % per_crop.len()] {
                        dets.push(Detection::new(
                            format!("{m}-{j}"),
                            DetectionSource::Detector { model_id: "m".into() },
                            m.clone(),
                            Region::new(1, 1, 10, 10).with_frame(crop_frame(5, 5, 1.0)),
                            BTreeMap::from([("wolf".to_string(), 0.8)]),
                        ));
                        expected += n;
                    }
                    k += 1;
                }
                groups.push(DedupGroup { group_id: format!("grp-{}", members[0]), representative: members[0].clone(), members, hash_bits: 0 });
            }
            let dims = BTreeMap::from([("img".to_string(), (100, 100))]);
            prop_assert_eq!(backmap(&dets, &crops, &groups, &dims).unwrap().len(), expected);
        }
    }
}
