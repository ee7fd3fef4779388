//! Config-driven, resumable stage runner.

pub mod config;
pub mod ledger;
pub mod pipeline;
pub mod stages;

pub use config::{load_config, parse_config, ConfigError, PipelineConfig, StageKind, DEFAULT_CONFIG};
pub use ledger::{LedgerEntry, RunLedger, StageRecord, StageStatus};
pub use pipeline::{describe_run, resume, run, run_status, EngineError, RunSummary};
