//! Crowd voting: tasks, tallies, the vote book, and the JSON export that
//! fusion consumes.

mod store;

pub use store::{CrowdStore, VoteBook, VoteRecord};

use crate::dedup::DedupGroup;
use crate::detect::{Detection, NEGATIVE_CLASS};
use crate::imaging::{CropOrigin, CropRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const DEFAULT_MIN_VOTES: u32 = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CrowdError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("choice {choice:?} is not offered by task {task_id:?}")]
    InvalidChoice { task_id: String, choice: String },
    #[error("crop {crop_id:?} has no image at {path}")]
    MissingCrop { crop_id: String, path: String },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("vote export schema: {0}")]
    Schema(String),
    #[error("crowd store: {0}")]
    Store(String),
}

pub fn task_id_for(crop_id: &str) -> String {
    format!("task-{crop_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTask {
    pub task_id: String,
    pub crop_id: String,
    /// Crop image, relative to the run directory.
    pub image_path: String,
    pub choices: Vec<String>,
    pub min_votes: u32,
}

impl VoteTask {
    /// Choices are the real classes in the given order followed by
    /// "nothing".
    pub fn new(crop_id: &str, image_path: &str, classes: &[String], min_votes: u32) -> Result<Self, CrowdError> {
        let mut choices: Vec<String> = Vec::new();
        for c in classes {
            if c != NEGATIVE_CLASS && !choices.contains(c) {
                choices.push(c.clone());
            }
        }
        if choices.is_empty() {
            return Err(CrowdError::InvalidTask("at least one real class is required".into()));
        }
        if min_votes == 0 {
            return Err(CrowdError::InvalidTask("min_votes must be positive".into()));
        }
        choices.push(NEGATIVE_CLASS.to_string());
        Ok(Self {
            task_id: task_id_for(crop_id),
            crop_id: crop_id.to_string(),
            image_path: image_path.to_string(),
            choices,
            min_votes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    pub task_id: String,
    pub crop_id: String,
    pub counts: BTreeMap<String, u32>,
    pub fractions: BTreeMap<String, f64>,
    pub total_votes: u32,
    pub complete: bool,
}

impl VoteTally {
    pub fn from_counts(task: &VoteTask, counts: BTreeMap<String, u32>) -> Self {
        let counts: BTreeMap<String, u32> = counts.into_iter().filter(|(_, n)| *n > 0).collect();
        let total: u32 = counts.values().sum();
        let fractions = counts
            .iter()
            .map(|(k, &n)| (k.clone(), n as f64 / total as f64))
            .collect();
        Self {
            task_id: task.task_id.clone(),
            crop_id: task.crop_id.clone(),
            counts,
            fractions,
            total_votes: total,
            complete: total >= task.min_votes,
        }
    }
}

/// Integer percentages: each rounded half up, then the shortfall or excess
/// against 100 goes to the choice with the largest count (first by name
/// on ties). Empty for zero votes.
pub fn percentages(counts: &BTreeMap<String, u32>) -> BTreeMap<String, u32> {
    let total: u64 = counts.values().map(|&n| n as u64).sum();
    if total == 0 {
        return BTreeMap::new();
    }
    let mut out: BTreeMap<String, u32> = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(k, &n)| (k.clone(), ((200 * n as u64 + total) / (2 * total)) as u32))
        .collect();
    let sum: i64 = out.values().map(|&p| p as i64).sum();
    let largest = counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .fold(None::<(&String, u32)>, |best, (k, &n)| match best {
            Some((_, b)) if b >= n => best,
            _ => Some((k, n)),
        })
        .map(|(k, _)| k.clone())
        .expect("non-empty");
    let slot = out.get_mut(&largest).expect("largest present");
    *slot = (*slot as i64 + 100 - sum) as u32;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub task_id: String,
    pub crop_id: String,
    pub total_votes: u32,
    pub min_votes: u32,
    pub complete: bool,
    pub counts: BTreeMap<String, u32>,
    pub percentages: BTreeMap<String, u32>,
    pub fractions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub tasks: Vec<ExportEntry>,
}

impl ExportDocument {
    pub fn from_tallies(entries: impl IntoIterator<Item = (VoteTally, u32)>) -> Self {
        let mut tasks: Vec<ExportEntry> = entries
            .into_iter()
            .map(|(t, min_votes)| ExportEntry {
                percentages: percentages(&t.counts),
                task_id: t.task_id,
                crop_id: t.crop_id,
                total_votes: t.total_votes,
                min_votes,
                complete: t.complete,
                counts: t.counts,
                fractions: t.fractions,
            })
            .collect();
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        Self { tasks }
    }

    /// Pretty-printed, newline-terminated; stable for fixed data.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("export serialises");
        s.push('\n');
        s
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, at: &str) -> Result<&'a Value, CrowdError> {
    obj.get(name)
        .ok_or_else(|| CrowdError::Schema(format!("{at}: missing field `{name}`")))
}

/// Parses an export document back into tallies. Counts are taken from
/// `counts` when present, otherwise rebuilt from fractions and the total.
pub fn import_results(text: &str) -> Result<Vec<VoteTally>, CrowdError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CrowdError::Schema(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| CrowdError::Schema("document is not an object".into()))?;
    let tasks = field(obj, "tasks", "document")?
        .as_array()
        .ok_or_else(|| CrowdError::Schema("`tasks` is not an array".into()))?;
    let mut out = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let at = format!("tasks[{i}]");
        let t = t
            .as_object()
            .ok_or_else(|| CrowdError::Schema(format!("{at} is not an object")))?;
        let string = |name: &str| -> Result<String, CrowdError> {
            field(t, name, &at)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| CrowdError::Schema(format!("{at}: `{name}` is not a string")))
        };
        let task_id = string("task_id")?;
        let crop_id = string("crop_id")?;
        let total_votes = field(t, "total_votes", &at)?
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| CrowdError::Schema(format!("{at}: `total_votes` is not a count")))?;
        let complete = field(t, "complete", &at)?
            .as_bool()
            .ok_or_else(|| CrowdError::Schema(format!("{at}: `complete` is not a boolean")))?;
        let fractions: BTreeMap<String, f64> = serde_json::from_value(field(t, "fractions", &at)?.clone())
            .map_err(|e| CrowdError::Schema(format!("{at}: `fractions`: {e}")))?;
        for (k, f) in &fractions {
            if !(0.0..=1.0).contains(f) {
                return Err(CrowdError::Schema(format!("{at}: fraction for {k:?} outside [0, 1]")));
            }
        }
        let counts: BTreeMap<String, u32> = match t.get("counts") {
            Some(c) => serde_json::from_value(c.clone()).map_err(|e| CrowdError::Schema(format!("{at}: `counts`: {e}")))?,
            None => fractions
                .iter()
                .map(|(k, f)| (k.clone(), (f * total_votes as f64).round() as u32))
                .collect(),
        };
        let counted: u32 = counts.values().sum();
        if counted != total_votes {
            return Err(CrowdError::Schema(format!(
                "{at}: counts sum to {counted}, total_votes is {total_votes}"
            )));
        }
        out.push(VoteTally {
            task_id,
            crop_id,
            counts,
            fractions,
            total_votes,
            complete,
        });
    }
    Ok(out)
}

/// One task per dedup-group representative that carries evidence: a
/// segmentation region (its crop came from a segmenter) or at least one
/// detection. Ordered by task id.
pub fn publish_tasks(
    groups: &[DedupGroup],
    crops: &[CropRecord],
    detections: &[Detection],
    classes: &[String],
    min_votes: u32,
    run_dir: &Path,
) -> Result<Vec<VoteTask>, CrowdError> {
    let by_id: BTreeMap<&str, &CropRecord> = crops.iter().map(|c| (c.crop_id.as_str(), c)).collect();
    let detected: BTreeSet<&str> = detections.iter().map(|d| d.subject.as_str()).collect();
    let mut tasks = Vec::new();
    for g in groups {
        let rep = g.representative.as_str();
        let crop = by_id.get(rep);
        // a crop exists only because a segmenter region or a detection produced it
        let has_region = crop.is_some_and(|c| matches!(c.origin, CropOrigin::Segmenter { .. } | CropOrigin::Detector { .. }));
        if !has_region && !detected.contains(rep) {
            continue;
        }
        let crop = crop.ok_or_else(|| CrowdError::MissingCrop {
            crop_id: rep.to_string(),
            path: String::new(),
        })?;
        let abs = run_dir.join(&crop.file);
        if !abs.is_file() {
            return Err(CrowdError::MissingCrop {
                crop_id: rep.to_string(),
                path: abs.display().to_string(),
            });
        }
        tasks.push(VoteTask::new(rep, &crop.file, classes, min_votes)?);
    }
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes() -> Vec<String> {
        vec!["wolf".into()]
    }

    fn counts(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn crop_rec(id: &str) -> CropRecord {
        CropRecord {
            crop_id: id.into(),
            parent_image_id: "img".into(),
            file: format!("crops/{id}.png"),
            width: 4,
            height: 4,
            region: crate::region::Region::new(0, 0, 4, 4),
            frame: crate::region::Frame::Original,
            origin: CropOrigin::Segmenter { segmenter: "mog2".into() },
        }
    }

    fn group(rep: &str, members: &[&str]) -> DedupGroup {
        DedupGroup {
            group_id: format!("grp-{rep}"),
            representative: rep.into(),
            members: members.iter().map(|m| m.to_string()).collect(),
            hash_bits: 0,
        }
    }

    #[test]
    fn one_task_per_group_with_evidence() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("crops")).unwrap();
        let ids = ["s00000-00", "s00001-00", "s00002-00", "s00003-00"];
        for id in ids {
            std::fs::write(dir.path().join(format!("crops/{id}.png")), b"png").unwrap();
        }
        let crops: Vec<CropRecord> = ids.iter().map(|id| crop_rec(id)).collect();
        let groups = vec![
            group("s00002-00", &["s00002-00"]),
            group("s00000-00", &["s00000-00", "s00001-00"]),
            group("s00003-00", &["s00003-00"]),
            // a representative with no crop and no detection carries no evidence
            group("ghost", &["ghost"]),
        ];
        let tasks = publish_tasks(&groups, &crops, &[], &classes(), 3, dir.path()).unwrap();
        let got: Vec<&str> = tasks.iter().map(|t| t.crop_id.as_str()).collect();
        assert_eq!(got, ["s00000-00", "s00002-00", "s00003-00"]);
        assert!(tasks.iter().all(|t| t.min_votes == 3 && t.image_path.starts_with("crops/")));
        assert_eq!(publish_tasks(&groups, &crops, &[], &classes(), 3, dir.path()).unwrap(), tasks);

        std::fs::remove_file(dir.path().join("crops/s00003-00.png")).unwrap();
        assert!(matches!(
            publish_tasks(&groups, &crops, &[], &classes(), 3, dir.path()),
            Err(CrowdError::MissingCrop { .. })
        ));
    }

    #[test]
    fn task_choices_end_with_nothing() {
        let t = VoteTask::new("c1", "crops/c1.png", &["wolf".into(), "nothing".into(), "deer".into()], 3).unwrap();
        assert_eq!(t.choices, vec!["wolf", "deer", "nothing"]);
        assert_eq!(t.task_id, "task-c1");
        assert!(VoteTask::new("c1", "p", &[], 3).is_err());
    }

    #[test]
    fn seven_vote_percentages() {
        let c = counts(&[("nothing", 6), ("wolf", 1)]);
        let p = percentages(&c);
        assert_eq!(p, counts(&[("nothing", 86), ("wolf", 14)]));
        let t = VoteTally::from_counts(&VoteTask::new("c", "p", &classes(), 3).unwrap(), c);
        assert!((t.fractions["nothing"] - 0.857143).abs() < 1e-6);
        assert!((t.fractions["wolf"] - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn percentage_edge_cases() {
        assert!(percentages(&BTreeMap::new()).is_empty());
        assert_eq!(percentages(&counts(&[("wolf", 1), ("nothing", 1)])), counts(&[("nothing", 50), ("wolf", 50)]));
        // thirds: 33+33+33 = 99, remainder to the first largest
        assert_eq!(
            percentages(&counts(&[("a", 1), ("b", 1), ("c", 1)])),
            counts(&[("a", 34), ("b", 33), ("c", 33)])
        );
    }

    #[test]
    fn zero_vote_export() {
        let task = VoteTask::new("c", "p", &classes(), 3).unwrap();
        let doc = ExportDocument::from_tallies([(VoteTally::from_counts(&task, BTreeMap::new()), 3)]);
        assert_eq!(doc.tasks[0].total_votes, 0);
        assert!(!doc.tasks[0].complete);
        assert!(doc.tasks[0].percentages.is_empty());
    }

    #[test]
    fn handwritten_fixture_imports() {
        let json = r#"{"tasks": [{"task_id": "task-x", "crop_id": "x", "total_votes": 7, "complete": true,
            "percentages": {"nothing": 86, "wolf": 14}, "fractions": {"nothing": 0.857143, "wolf": 0.142857}}]}"#;
        let t = import_results(json).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].counts, counts(&[("nothing", 6), ("wolf", 1)]));
        assert_eq!(t[0].fractions.len(), 2);
    }

    #[test]
    fn missing_field_is_named() {
        let json = r#"{"tasks": [{"task_id": "task-x", "total_votes": 1, "complete": false, "fractions": {}}]}"#;
        match import_results(json) {
            Err(CrowdError::Schema(m)) => assert!(m.contains("crop_id"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(import_results("{}"), Err(CrowdError::Schema(m)) if m.contains("tasks")));
    }

    proptest! {
        #[test]
        fn export_import_round_trip(raw in proptest::collection::vec((0u32..50, 0u32..50, 0u32..20), 1..20), min_votes in 1u32..6) {
            let task_tallies: Vec<(VoteTally, u32)> = raw
                .iter()
                .enumerate()
                .map(|(i, &(w, n, d))| {
                    let task = VoteTask::new(&format!("c{i:03}"), "p", &["wolf".into(), "deer".into()], min_votes).unwrap();
                    (VoteTally::from_counts(&task, counts(&[("wolf", w), ("nothing", n), ("deer", d)])), min_votes)
                })
                .collect();
            let doc = ExportDocument::from_tallies(task_tallies.clone());
            let back = import_results(&doc.to_json()).unwrap();
            prop_assert_eq!(back.len(), task_tallies.len());
            for (orig, (want, _)) in back.iter().zip(task_tallies.iter()) {
                prop_assert_eq!(&orig.task_id, &want.task_id);
                prop_assert_eq!(&orig.counts, &want.counts);
                prop_assert_eq!(orig.total_votes, want.total_votes);
                for (k, f) in &want.fractions {
                    prop_assert!((orig.fractions[k] - f).abs() <= 1e-6);
                }
                if want.total_votes > 0 {
                    prop_assert!((orig.fractions.values().sum::<f64>() - 1.0).abs() <= 1e-9);
                    let pct: u32 = percentages(&want.counts).values().sum();
                    prop_assert_eq!(pct, 100);
                }
            }
        }
    }
}
