//! The single JSON configuration file: general settings plus an ordered
//! list of stage modules with their parameters.

use crate::detect::adapter::{AdapterSpec, BuiltinAdapter};
use crate::fuse::{DetectorWeights, FusionMode, DEFAULT_MERGE_IOU, DEFAULT_THRESHOLD};
use crate::imaging::SegmentParams;
use chrono::NaiveDateTime;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Analysis,
    Batching,
    Preprocessing,
    Segmentation,
    Detection,
    Duplicates,
    Evaluation,
    Backmapping,
    Decision,
    TrainingData,
}

impl StageKind {
    pub const ALL: [StageKind; 10] = [
        StageKind::Analysis,
        StageKind::Batching,
        StageKind::Preprocessing,
        StageKind::Segmentation,
        StageKind::Detection,
        StageKind::Duplicates,
        StageKind::Evaluation,
        StageKind::Backmapping,
        StageKind::Decision,
        StageKind::TrainingData,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Analysis => "analysis",
            StageKind::Batching => "batching",
            StageKind::Preprocessing => "preprocessing",
            StageKind::Segmentation => "segmentation",
            StageKind::Detection => "detection",
            StageKind::Duplicates => "duplicates",
            StageKind::Evaluation => "evaluation",
            StageKind::Backmapping => "backmapping",
            StageKind::Decision => "decision",
            StageKind::TrainingData => "training_data",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Stages whose artifacts this one consumes. Each inner list is a set
    /// of alternatives, at least one of which must run earlier.
    pub fn requires(self) -> &'static [&'static [StageKind]] {
        use StageKind::*;
        match self {
            Analysis => &[],
            Batching | Preprocessing | Detection => &[&[Analysis]],
            Segmentation => &[&[Batching]],
            Duplicates => &[&[Segmentation, Detection]],
            Evaluation => &[&[Duplicates]],
            Backmapping => &[&[Detection, Evaluation]],
            Decision => &[&[Backmapping]],
            TrainingData => &[&[Decision]],
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct General {
    pub input_dir: PathBuf,
    pub file_extensions: Vec<String>,
    pub run_dir: PathBuf,
    /// Real object classes, in label-index order. The negative class
    /// `nothing` is implicit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    pub stage: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

/// The configuration exactly as written; this is what the run ledger
/// snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub general: General,
    pub modules: Vec<ModuleConfig>,
}

// ---- typed stage parameters ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDir {
    /// Directory of extracted video frames, relative to `input_dir`.
    pub dir: PathBuf,
    pub fps: f64,
    pub start: NaiveDateTime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisParams {
    /// Regex whose first group holds fractional-second digits in file names.
    pub subsecond_pattern: Option<String>,
    pub frame_dirs: Vec<FrameDir>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingParams {
    pub gap_seconds: f64,
}

impl Default for BatchingParams {
    fn default() -> Self {
        Self { gap_seconds: 5.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    /// `profiles.json` keyed by camera serial; absent means pass-through.
    pub profiles: Option<PathBuf>,
    /// Fail on images whose camera has no profile instead of passing them
    /// through.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    pub adapter: AdapterSpec,
    pub batch_size: usize,
    pub parallel: usize,
    pub class_map: BTreeMap<String, String>,
    /// Run the detector on whole source images.
    pub full_frames: bool,
    /// Run the detector on segmentation crops.
    pub crops: bool,
    /// Cut crops around full-frame detections for crowd review.
    pub detection_crops: bool,
    pub crop_pad_px: u32,
    pub crop_long_side: Option<u32>,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            adapter: AdapterSpec::Builtin(BuiltinAdapter::Mock),
            batch_size: 64,
            parallel: 1,
            class_map: BTreeMap::new(),
            full_frames: true,
            crops: true,
            detection_crops: true,
            crop_pad_px: 0,
            crop_long_side: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuplicatesParams {
    pub threshold_bits: u32,
}

impl Default for DuplicatesParams {
    fn default() -> Self {
        Self {
            threshold_bits: crate::dedup::DEFAULT_THRESHOLD_BITS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// Publish tasks to the vote store under `run_dir/crowd` and use the
    /// tallies collected there.
    Service,
    /// Read tallies from a saved export document.
    Replay,
    /// Skip crowd evaluation.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationParams {
    pub mode: EvaluationMode,
    /// Export document to replay (mode `replay`).
    pub export: Option<PathBuf>,
    pub min_votes: u32,
    /// In service mode, continue with whatever votes exist instead of
    /// stopping while tasks are incomplete.
    pub allow_incomplete: bool,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        Self {
            mode: EvaluationMode::Service,
            export: None,
            min_votes: crate::crowd::DEFAULT_MIN_VOTES,
            allow_incomplete: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackmappingParams {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionParams {
    pub weights: DetectorWeights,
    pub merge_iou: f64,
    pub fusion: FusionMode,
    pub threshold: f64,
    /// Write a review report for images whose best label falls in
    /// `[lo, hi]`.
    pub review_band: Option<[f64; 2]>,
}

impl Default for DecisionParams {
    fn default() -> Self {
        Self {
            weights: DetectorWeights::default(),
            merge_iou: DEFAULT_MERGE_IOU,
            fusion: FusionMode::TopClass,
            threshold: DEFAULT_THRESHOLD,
            review_band: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDataParams {
    /// Empty list exports nothing.
    pub formats: Vec<ExportFormat>,
    pub with_confidence: bool,
}

impl Default for TrainingDataParams {
    fn default() -> Self {
        Self {
            formats: vec![ExportFormat::Hard, ExportFormat::Soft],
            with_confidence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageParams {
    Analysis(AnalysisParams),
    Batching(BatchingParams),
    Preprocessing(PreprocessParams),
    Segmentation(SegmentParams),
    Detection(DetectionParams),
    Duplicates(DuplicatesParams),
    Evaluation(EvaluationParams),
    Backmapping(BackmappingParams),
    Decision(DecisionParams),
    TrainingData(TrainingDataParams),
}

/// One validated module of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub kind: StageKind,
    /// Artifact directory and ledger key: the stage name, suffixed `.N`
    /// for the N-th repeat of a stage.
    pub key: String,
    /// 1 for the first occurrence of this stage kind.
    pub instance: usize,
    pub debug_images: bool,
    pub params: StageParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub raw: RawConfig,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
    pub stages: Vec<StageSpec>,
}

impl PipelineConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn input_dir(&self) -> PathBuf {
        self.resolve(&self.raw.general.input_dir)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.raw.general.run_dir)
    }

    pub fn classes(&self) -> &[String] {
        &self.raw.general.classes
    }

    pub fn stage(&self, key: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.key == key)
    }
}

fn typed<T: DeserializeOwned>(key: &str, params: &Map<String, Value>) -> Result<T, ConfigError> {
    serde_json::from_value(Value::Object(params.clone()))
        .map_err(|e| ConfigError::Validation(format!("stage `{key}`: {e}")))
}

fn check(ok: bool, key: &str, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Validation(format!("stage `{key}`: {msg}")))
    }
}

fn parse_params(kind: StageKind, key: &str, params: &Map<String, Value>) -> Result<StageParams, ConfigError> {
    Ok(match kind {
        StageKind::Analysis => {
            let p: AnalysisParams = typed(key, params)?;
            if let Some(pat) = &p.subsecond_pattern {
                regex::Regex::new(pat).map_err(|e| ConfigError::Validation(format!("stage `{key}`: subsecond_pattern: {e}")))?;
            }
            for f in &p.frame_dirs {
                check(f.fps > 0.0 && f.fps.is_finite(), key, "frame_dirs fps must be positive")?;
            }
            StageParams::Analysis(p)
        }
        StageKind::Batching => {
            let p: BatchingParams = typed(key, params)?;
            check(p.gap_seconds > 0.0 && p.gap_seconds.is_finite(), key, "gap_seconds must be positive")?;
            StageParams::Batching(p)
        }
        StageKind::Preprocessing => StageParams::Preprocessing(typed(key, params)?),
        StageKind::Segmentation => {
            let p: SegmentParams = typed(key, params)?;
            p.mog2.validate().map_err(|e| ConfigError::Validation(format!("stage `{key}`: mog2: {e}")))?;
            check(
                (0.0..1.0).contains(&p.mask.min_area_fraction),
                key,
                "mask.min_area_fraction must lie in [0, 1)",
            )?;
            check(p.processing_long_side != Some(0) && p.crop_long_side != Some(0), key, "long-side limits must be positive")?;
            StageParams::Segmentation(p)
        }
        StageKind::Detection => {
            let p: DetectionParams = typed(key, params)?;
            check(p.batch_size > 0, key, "batch_size must be positive")?;
            check(p.parallel > 0, key, "parallel must be positive")?;
            check(p.full_frames || p.crops, key, "at least one of full_frames and crops must be enabled")?;
            if let AdapterSpec::Command(argv) = &p.adapter {
                check(!argv.is_empty(), key, "adapter command is empty")?;
            }
            check(p.crop_long_side != Some(0), key, "crop_long_side must be positive")?;
            StageParams::Detection(p)
        }
        StageKind::Duplicates => {
            let p: DuplicatesParams = typed(key, params)?;
            check(p.threshold_bits <= 64, key, "threshold_bits must lie in [0, 64]")?;
            StageParams::Duplicates(p)
        }
        StageKind::Evaluation => {
            let p: EvaluationParams = typed(key, params)?;
            check(p.min_votes > 0, key, "min_votes must be positive")?;
            check(p.mode != EvaluationMode::Replay || p.export.is_some(), key, "mode `replay` requires `export`")?;
            StageParams::Evaluation(p)
        }
        StageKind::Backmapping => StageParams::Backmapping(typed(key, params)?),
        StageKind::Decision => {
            let p: DecisionParams = typed(key, params)?;
            check((0.0..=1.0).contains(&p.merge_iou), key, "merge_iou must lie in [0, 1]")?;
            check((0.0..=1.0).contains(&p.threshold), key, "threshold must lie in [0, 1]")?;
            if let Some([lo, hi]) = p.review_band {
                check(0.0 <= lo && lo <= hi && hi <= 1.0, key, "review_band must satisfy 0 <= lo <= hi <= 1")?;
            }
            StageParams::Decision(p)
        }
        StageKind::TrainingData => StageParams::TrainingData(typed(key, params)?),
    })
}

/// Validates a raw config: known stages, well-typed parameters and stage
/// order consistent with data dependencies.
pub fn validate(raw: RawConfig, base_dir: &Path) -> Result<PipelineConfig, ConfigError> {
    if raw.modules.is_empty() {
        return Err(ConfigError::Validation("`modules` is empty".into()));
    }
    if raw.general.file_extensions.is_empty() {
        return Err(ConfigError::Validation("general.file_extensions is empty".into()));
    }
    let mut seen: BTreeMap<StageKind, usize> = BTreeMap::new();
    let mut stages = Vec::with_capacity(raw.modules.len());
    for (i, m) in raw.modules.iter().enumerate() {
        let kind = StageKind::parse(&m.stage).ok_or_else(|| {
            ConfigError::Validation(format!("module {}: unknown stage `{}`", i + 1, m.stage))
        })?;
        for alternatives in kind.requires() {
            if !alternatives.iter().any(|a| seen.contains_key(a)) {
                let names: Vec<&str> = alternatives.iter().map(|a| a.as_str()).collect();
                return Err(ConfigError::Validation(format!(
                    "stage `{}` must come after {}",
                    kind,
                    names.join(" or ")
                )));
            }
        }
        let n = seen.entry(kind).or_insert(0);
        *n += 1;
        let instance = *n;
        let key = if instance == 1 {
            kind.as_str().to_string()
        } else {
            format!("{kind}.{instance}")
        };
        let mut params = m.params.clone();
        let debug_images = match params.remove("debug_images") {
            None => false,
            Some(Value::Bool(b)) => b,
            Some(other) => {
                return Err(ConfigError::Validation(format!("stage `{key}`: debug_images must be a boolean, got {other}")));
            }
        };
        let params = parse_params(kind, &key, &params)?;
        stages.push(StageSpec {
            kind,
            key,
            instance,
            debug_images,
            params,
        });
    }
    let needs_classes = stages
        .iter()
        .any(|s| matches!(s.kind, StageKind::Detection | StageKind::Evaluation | StageKind::TrainingData));
    if needs_classes && raw.general.classes.is_empty() {
        return Err(ConfigError::Validation("general.classes must list at least one class".into()));
    }
    if raw.general.classes.iter().any(|c| crate::detect::canonical_class(c) == crate::detect::NEGATIVE_CLASS) {
        return Err(ConfigError::Validation("general.classes must not contain the negative class".into()));
    }
    Ok(PipelineConfig {
        raw,
        base_dir: base_dir.to_path_buf(),
        stages,
    })
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<PipelineConfig, ConfigError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate(raw, base_dir)
}

/// Reads and validates a config file. Relative paths inside it resolve
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    parse_config(&text, &base)
}

/// The reference configuration: all ten stages with 0.6/0.4 crowd and
/// detector weights and a 0.5 hard-label threshold.
pub const DEFAULT_CONFIG: &str = include_str!("default_config.json");

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(modules: &str) -> Result<PipelineConfig, ConfigError> {
        parse_config(
            &format!(r#"{{"general": {{"input_dir": "in", "file_extensions": ["jpg"], "run_dir": "run", "classes": ["wolf"]}}, "modules": {modules}}}"#),
            Path::new("/base"),
        )
    }

    #[test]
    fn minimal_config() {
        let c = cfg(r#"[{"stage": "analysis"}, {"stage": "batching", "params": {"gap_seconds": 5}}]"#).unwrap();
        assert_eq!(c.stages.len(), 2);
        assert_eq!(c.run_dir(), PathBuf::from("/base/run"));
    }

    #[test]
    fn unknown_stage_named() {
        let e = cfg(r#"[{"stage": "analysis"}, {"stage": "frobnicate"}]"#).unwrap_err();
        assert!(matches!(&e, ConfigError::Validation(m) if m.contains("frobnicate")), "{e}");
    }

    #[test]
    fn dependency_order_enforced() {
        let e = cfg(r#"[{"stage": "batching"}, {"stage": "analysis"}]"#).unwrap_err();
        assert!(e.to_string().contains("batching"));
    }

    #[test]
    fn bad_param_type_and_unknown_param() {
        assert!(matches!(
            cfg(r#"[{"stage": "analysis"}, {"stage": "batching", "params": {"gap_seconds": "five"}}]"#),
            Err(ConfigError::Validation(_))
        ));
        let e = cfg(r#"[{"stage": "analysis"}, {"stage": "batching", "params": {"gap": 5}}]"#).unwrap_err();
        assert!(e.to_string().contains("gap"));
        assert!(cfg(r#"[{"stage": "analysis"}, {"stage": "batching", "params": {"gap_seconds": -1}}]"#).is_err());
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse_config("{", Path::new(".")), Err(ConfigError::Parse(_))));
        assert!(matches!(
            parse_config(r#"{"general": {"input_dir": "i", "file_extensions": ["jpg"], "run_dir": "r"}, "modules": [], "extra": 1}"#, Path::new(".")),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn repeated_stage_gets_distinct_key() {
        let c = cfg(r#"[{"stage": "analysis"}, {"stage": "batching"}, {"stage": "segmentation"}, {"stage": "segmentation", "params": {"method": "img_diff", "debug_images": true}}]"#).unwrap();
        let keys: Vec<&str> = c.stages.iter().map(|s| s.key.as_str()).collect();
        assert_eq!(keys, vec!["analysis", "batching", "segmentation", "segmentation.2"]);
        assert!(c.stages[3].debug_images);
        assert_eq!(c.stages[3].instance, 2);
    }

    #[test]
    fn weights_checked_at_load() {
        let m = r#"[{"stage": "analysis"}, {"stage": "detection"}, {"stage": "backmapping"}, {"stage": "decision", "params": {"weights": {"crowd": 0.7, "detector": 0.4}}}]"#;
        assert!(matches!(cfg(m), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn replay_requires_export() {
        let m = r#"[{"stage": "analysis"}, {"stage": "detection"}, {"stage": "duplicates"}, {"stage": "evaluation", "params": {"mode": "replay"}}]"#;
        assert!(cfg(m).unwrap_err().to_string().contains("export"));
    }

    #[test]
    fn default_config_has_ten_modules() {
        let c = parse_config(DEFAULT_CONFIG, Path::new(".")).unwrap();
        assert_eq!(c.stages.len(), 10);
        let kinds: Vec<StageKind> = c.stages.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, StageKind::ALL.to_vec());
        let StageParams::Decision(d) = &c.stage("decision").unwrap().params else { panic!() };
        assert_eq!(d.weights.get("crowd"), Some(0.6));
        assert_eq!(d.weights.get("detector"), Some(0.4));
        assert_eq!(d.threshold, 0.5);
        let StageParams::Batching(b) = &c.stage("batching").unwrap().params else { panic!() };
        assert_eq!(b.gap_seconds, 5.0);
    }
}
