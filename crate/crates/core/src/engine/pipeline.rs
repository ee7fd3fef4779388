//! Stage sequencing, the run ledger and resume.

use super::config::{validate, ConfigError, PipelineConfig};
use super::ledger::{LedgerEntry, LedgerError, RunLedger, StageRecord, StageStatus};
use super::stages::{run_stage, StageCtx, StageOutput};
use chrono::Utc;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger conflict: {0}")]
    LedgerConflict(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("run directory {0} already holds a run; resume it or pass --force")]
    RunExists(PathBuf),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::LedgerConflict(_) | EngineError::UnknownStage(_) | EngineError::RunExists(_) => 2,
            EngineError::Stage { .. } => 3,
            _ => 1,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub run_id: String,
    /// Stages executed by this invocation, in order.
    pub executed: Vec<StageRecord>,
}

fn position(config: &PipelineConfig, key: &str) -> Result<usize, EngineError> {
    config
        .stages
        .iter()
        .position(|s| s.key == key)
        .ok_or_else(|| EngineError::UnknownStage(key.to_string()))
}

fn end_index(config: &PipelineConfig, until: Option<&str>) -> Result<usize, EngineError> {
    match until {
        Some(k) => Ok(position(config, k)? + 1),
        None => Ok(config.stages.len()),
    }
}

fn clear_stage_dirs(config: &PipelineConfig, run_dir: &Path, from: usize) -> Result<(), EngineError> {
    for s in &config.stages[from..] {
        let d = run_dir.join(&s.key);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(io(&d))?;
        }
    }
    Ok(())
}

/// Starts a fresh run. An existing run in the same directory is an error
/// unless `force`, which discards its stage artifacts and ledger (the vote
/// store is kept).
pub fn run(config: &PipelineConfig, until: Option<&str>, force: bool) -> Result<RunSummary, EngineError> {
    let end = end_index(config, until)?;
    let run_dir = config.run_dir();
    if RunLedger::path_in(&run_dir).exists() {
        if !force {
            return Err(EngineError::RunExists(run_dir));
        }
        clear_stage_dirs(config, &run_dir, 0)?;
    }
    std::fs::create_dir_all(&run_dir).map_err(io(&run_dir))?;
    let mut ledger = RunLedger::create(&run_dir, &config.raw)?;
    let executed = execute(config, &run_dir, &mut ledger, 0, end)?;
    Ok(RunSummary {
        run_id: ledger.run_id().to_string(),
        run_dir,
        executed,
    })
}

/// Continues an existing run. Without `from`, restarts at the first stage
/// whose latest record is not a completion. Every stage before the restart
/// point must have completed; the config must equal the ledger's snapshot.
pub fn resume(config: &PipelineConfig, from: Option<&str>, until: Option<&str>) -> Result<RunSummary, EngineError> {
    let run_dir = config.run_dir();
    let mut ledger = RunLedger::open(&run_dir)?;
    if ledger.config_snapshot() != &config.raw {
        return Err(EngineError::LedgerConflict(format!(
            "config differs from the one recorded in {}; start a new run instead",
            RunLedger::path_in(&run_dir).display()
        )));
    }
    let order: Vec<String> = config.stages.iter().map(|s| s.key.clone()).collect();
    let eff = ledger.effective(&order);
    let done = |k: &str| eff.get(k).is_some_and(|r| r.status == StageStatus::Completed);
    let start = match from {
        Some(k) => position(config, k)?,
        None => order.iter().position(|k| !done(k)).unwrap_or(order.len()),
    };
    if let Some(missing) = order[..start].iter().find(|k| !done(k)) {
        return Err(EngineError::LedgerConflict(format!(
            "cannot resume from `{}`: earlier stage `{missing}` has not completed",
            order.get(start).map(String::as_str).unwrap_or("<end>")
        )));
    }
    let end = end_index(config, until)?;
    let mut executed = Vec::new();
    if start < end {
        clear_stage_dirs(config, &run_dir, start)?;
        ledger.append(LedgerEntry::Resumed {
            from: order[start].clone(),
            at: Utc::now(),
        })?;
        executed = execute(config, &run_dir, &mut ledger, start, end)?;
    }
    Ok(RunSummary {
        run_id: ledger.run_id().to_string(),
        run_dir,
        executed,
    })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn execute(
    config: &PipelineConfig,
    run_dir: &Path,
    ledger: &mut RunLedger,
    start: usize,
    end: usize,
) -> Result<Vec<StageRecord>, EngineError> {
    let mut executed = Vec::new();
    for index in start..end {
        let spec = &config.stages[index];
        let dir = run_dir.join(&spec.key);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let ctx = StageCtx {
            config,
            run_dir: run_dir.to_path_buf(),
            index,
            dir,
        };
        log::info!("stage {} starting", spec.key);
        let started_at = Utc::now();
        let result = catch_unwind(AssertUnwindSafe(|| run_stage(&ctx)))
            .unwrap_or_else(|p| Err(panic_message(p).into()));
        let finished_at = Utc::now();
        let record = match result {
            Ok(StageOutput { artifacts, counts }) => {
                let mut paths: Vec<String> = artifacts
                    .iter()
                    .map(|p| {
                        p.strip_prefix(run_dir)
                            .unwrap_or(p)
                            .to_string_lossy()
                            .replace('\\', "/")
                    })
                    .collect();
                paths.dedup();
                StageRecord {
                    stage_name: spec.key.clone(),
                    started_at,
                    finished_at,
                    status: StageStatus::Completed,
                    artifact_paths: paths,
                    record_counts: counts,
                    error: None,
                }
            }
            Err(e) => {
                let message = e.to_string();
                ledger.append(LedgerEntry::Stage(StageRecord {
                    stage_name: spec.key.clone(),
                    started_at,
                    finished_at,
                    status: StageStatus::Failed,
                    artifact_paths: Vec::new(),
                    record_counts: BTreeMap::new(),
                    error: Some(message.clone()),
                }))?;
                log::error!("stage {} failed: {message}", spec.key);
                return Err(EngineError::Stage {
                    stage: spec.key.clone(),
                    message,
                });
            }
        };
        log::info!("stage {} completed {:?}", spec.key, record.record_counts);
        ledger.append(LedgerEntry::Stage(record.clone()))?;
        executed.push(record);
    }
    Ok(executed)
}

#[derive(Debug, Clone)]
pub struct StageState {
    pub key: String,
    /// `None` when the stage has not run (or was superseded by a resume).
    pub record: Option<StageRecord>,
}

/// Effective state of every configured stage of the run in `run_dir`.
pub fn run_status(run_dir: &Path) -> Result<(String, Vec<StageState>), EngineError> {
    let ledger = RunLedger::open(run_dir)?;
    let config = validate(ledger.config_snapshot().clone(), run_dir)?;
    let order: Vec<String> = config.stages.iter().map(|s| s.key.clone()).collect();
    let mut eff = ledger.effective(&order);
    let states = order
        .into_iter()
        .map(|key| StageState {
            record: eff.remove(&key),
            key,
        })
        .collect();
    Ok((ledger.run_id().to_string(), states))
}

/// One human-readable line per stage.
pub fn describe_run(run_dir: &Path) -> Result<Vec<String>, EngineError> {
    let (run_id, states) = run_status(run_dir)?;
    let mut lines = vec![format!("run {run_id}")];
    for s in states {
        let line = match s.record {
            None => format!("{:<16} pending", s.key),
            Some(r) => {
                let status = match r.status {
                    StageStatus::Completed => "completed",
                    StageStatus::Failed => "FAILED",
                };
                let counts: Vec<String> = r.record_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let secs = (r.finished_at - r.started_at).num_milliseconds() as f64 / 1000.0;
                let mut l = format!("{:<16} {status:<9} {secs:>7.2}s  {}", s.key, counts.join(" "));
                if let Some(e) = r.error {
                    l.push_str(&format!("  error: {e}"));
                }
                l
            }
        };
        lines.push(line.trim_end().to_string());
    }
    Ok(lines)
}
