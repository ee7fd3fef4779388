#![allow(dead_code)]

use serde_json::{json, Value};
use shadowpipe_core::crowd::{self, VoteTally};
use shadowpipe_core::engine::stages::{CROPS, DETECTIONS, GROUPS};
use shadowpipe_core::engine::{parse_config, run, PipelineConfig};
use shadowpipe_core::jsonl;
use std::collections::BTreeMap;
use std::path::Path;

/// Full ten-stage config over `input` writing to `run`, with the given
/// evaluation params.
pub fn config_json(input: &Path, run: &Path, evaluation: Value) -> Value {
    json!({
        "general": {
            "input_dir": input,
            "file_extensions": ["jpg", "png"],
            "run_dir": run,
            "classes": ["wolf"]
        },
        "modules": [
            { "stage": "analysis", "params": {} },
            { "stage": "batching", "params": { "gap_seconds": 5 } },
            { "stage": "preprocessing", "params": {} },
            { "stage": "segmentation", "params": { "method": "mog2" } },
            { "stage": "detection", "params": { "adapter": "mock", "class_map": { "target": "wolf" } } },
            { "stage": "duplicates", "params": {} },
            { "stage": "evaluation", "params": evaluation },
            { "stage": "backmapping", "params": {} },
            { "stage": "decision", "params": { "review_band": [0.3, 0.7] } },
            { "stage": "training_data", "params": {} }
        ]
    })
}

pub fn config(v: &Value, base: &Path) -> PipelineConfig {
    parse_config(&v.to_string(), base).unwrap()
}

/// Votes a scripted crowd would cast: every fifth task says "nothing",
/// the rest "wolf", each with `votes` votes.
pub fn scripted_tally(tasks: &[crowd::VoteTask], votes: u32) -> Vec<VoteTally> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let choice = if i % 5 == 4 { "nothing" } else { "wolf" };
            VoteTally::from_counts(t, BTreeMap::from([(choice.to_string(), votes)]))
        })
        .collect()
}

/// Runs the pipeline up to duplicates in a scratch run directory, derives
/// the vote tasks the evaluation stage would publish, and writes a crowd
/// export answering all of them to `export`.
pub fn write_replay_export(input: &Path, scratch: &Path, export: &Path) -> usize {
    let v = config_json(input, scratch, json!({ "mode": "none" }));
    let cfg = config(&v, scratch);
    run(&cfg, Some("duplicates"), true).unwrap();
    let mut crops: Vec<shadowpipe_core::imaging::CropRecord> = jsonl::read(&scratch.join("segmentation").join(CROPS)).unwrap();
    crops.extend(jsonl::read::<shadowpipe_core::imaging::CropRecord>(&scratch.join("detection").join(CROPS)).unwrap());
    let groups: Vec<shadowpipe_core::dedup::DedupGroup> = jsonl::read(&scratch.join("duplicates").join(GROUPS)).unwrap();
    let dets: Vec<shadowpipe_core::detect::Detection> = jsonl::read(&scratch.join("detection").join(DETECTIONS)).unwrap();
    let tasks = crowd::publish_tasks(&groups, &crops, &dets, cfg.classes(), 3, scratch).unwrap();
    let doc = shadowpipe_core::crowd::ExportDocument::from_tallies(scripted_tally(&tasks, 3).into_iter().map(|t| (t, 3)));
    std::fs::write(export, doc.to_json()).unwrap();
    tasks.len()
}

/// Every file under `dir`, relative path → bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return out;
    }
    for e in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let e = e.unwrap();
        if e.file_type().is_file() {
            let rel = e.path().strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            out.insert(rel, std::fs::read(e.path()).unwrap());
        }
    }
    out
}
