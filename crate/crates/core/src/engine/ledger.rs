//! `run_dir/ledger.jsonl`: an append-only log of run starts, resumes and
//! stage outcomes. Every append rewrites the file through a temporary and
//! a rename, so a crash never leaves a torn line.

use super::config::RawConfig;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub status: StageStatus,
    /// Paths relative to the run directory.
    pub artifact_paths: Vec<String>,
    pub record_counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEntry {
    RunStarted {
        run_id: String,
        started_at: DateTime<Utc>,
        config_snapshot: RawConfig,
    },
    /// Stage records for `from` and later that precede this entry are
    /// superseded.
    Resumed { from: String, at: DateTime<Utc> },
    Stage(StageRecord),
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("no run ledger in {0}")]
    NotFound(PathBuf),
    #[error("ledger {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RunLedger {
    path: PathBuf,
    entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn path_in(run_dir: &Path) -> PathBuf {
        run_dir.join(LEDGER_FILE)
    }

    /// Starts a fresh ledger, replacing any previous one.
    pub fn create(run_dir: &Path, config: &RawConfig) -> Result<Self, LedgerError> {
        let mut l = Self {
            path: Self::path_in(run_dir),
            entries: Vec::new(),
        };
        l.append(LedgerEntry::RunStarted {
            run_id: uuid::Uuid::new_v4().to_string(),
            started_at: Utc::now(),
            config_snapshot: config.clone(),
        })?;
        Ok(l)
    }

    pub fn open(run_dir: &Path) -> Result<Self, LedgerError> {
        let path = Self::path_in(run_dir);
        if !path.is_file() {
            return Err(LedgerError::NotFound(run_dir.to_path_buf()));
        }
        let entries: Vec<LedgerEntry> = crate::jsonl::read(&path).map_err(|e| LedgerError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if !matches!(entries.first(), Some(LedgerEntry::RunStarted { .. })) {
            return Err(LedgerError::Corrupt {
                path,
                message: "first entry is not a run start".into(),
            });
        }
        Ok(Self { path, entries })
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn run_id(&self) -> &str {
        match &self.entries[0] {
            LedgerEntry::RunStarted { run_id, .. } => run_id,
            _ => unreachable!("checked on open"),
        }
    }

    pub fn config_snapshot(&self) -> &RawConfig {
        match &self.entries[0] {
            LedgerEntry::RunStarted { config_snapshot, .. } => config_snapshot,
            _ => unreachable!("checked on open"),
        }
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        self.entries.push(entry);
        let io = |source| LedgerError::Io {
            path: self.path.clone(),
            source,
        };
        let mut buf = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e).map_err(|e| io(std::io::Error::other(e)))?;
            buf.push(b'\n');
        }
        crate::jsonl::write_atomic(&self.path, &buf).map_err(io)
    }

    /// The latest still-valid record per stage key, given the stage order.
    /// A resume marker invalidates records of its stage and everything
    /// after it.
    pub fn effective(&self, order: &[String]) -> BTreeMap<String, StageRecord> {
        let pos = |k: &str| order.iter().position(|o| o == k).unwrap_or(usize::MAX);
        let mut out: BTreeMap<String, StageRecord> = BTreeMap::new();
        for e in &self.entries {
            match e {
                LedgerEntry::RunStarted { .. } => {}
                LedgerEntry::Resumed { from, .. } => {
                    let cut = pos(from);
                    out.retain(|k, _| pos(k) < cut);
                }
                LedgerEntry::Stage(r) => {
                    out.insert(r.stage_name.clone(), r.clone());
                }
            }
        }
        out
    }

    /// Stage records in append order.
    pub fn stage_records(&self) -> impl Iterator<Item = &StageRecord> {
        self.entries.iter().filter_map(|e| match e {
            LedgerEntry::Stage(r) => Some(r),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::{General, ModuleConfig};

    fn raw() -> RawConfig {
        RawConfig {
            general: General {
                input_dir: "in".into(),
                file_extensions: vec!["jpg".into()],
                run_dir: "run".into(),
                classes: vec![],
            },
            modules: vec![ModuleConfig {
                stage: "analysis".into(),
                params: Default::default(),
            }],
        }
    }

    fn rec(name: &str, status: StageStatus) -> LedgerEntry {
        LedgerEntry::Stage(StageRecord {
            stage_name: name.into(),
            started_at: Utc::now(),
            finished_at: Utc::now(),
            status,
            artifact_paths: vec![],
            record_counts: BTreeMap::new(),
            error: None,
        })
    }

    #[test]
    fn append_only_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut l = RunLedger::create(dir.path(), &raw()).unwrap();
        l.append(rec("a", StageStatus::Completed)).unwrap();
        let before = std::fs::read_to_string(RunLedger::path_in(dir.path())).unwrap();
        l.append(rec("b", StageStatus::Failed)).unwrap();
        let after = std::fs::read_to_string(RunLedger::path_in(dir.path())).unwrap();
        assert!(after.starts_with(&before));
        let l2 = RunLedger::open(dir.path()).unwrap();
        assert_eq!(l2.entries(), l.entries());
        assert_eq!(l2.config_snapshot(), &raw());
        assert_eq!(l2.run_id(), l.run_id());
    }

    #[test]
    fn resume_marker_supersedes_later_stages() {
        let dir = tempfile::tempdir().unwrap();
        let order: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut l = RunLedger::create(dir.path(), &raw()).unwrap();
        l.append(rec("a", StageStatus::Completed)).unwrap();
        l.append(rec("b", StageStatus::Completed)).unwrap();
        l.append(rec("c", StageStatus::Failed)).unwrap();
        l.append(LedgerEntry::Resumed { from: "b".into(), at: Utc::now() }).unwrap();
        let eff = l.effective(&order);
        assert_eq!(eff.keys().collect::<Vec<_>>(), vec!["a"]);
        l.append(rec("b", StageStatus::Completed)).unwrap();
        assert_eq!(l.effective(&order)["b"].status, StageStatus::Completed);
    }

    #[test]
    fn missing_ledger() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(RunLedger::open(dir.path()), Err(LedgerError::NotFound(_))));
    }
}
