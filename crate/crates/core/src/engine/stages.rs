//! The ten stage bodies. Each reads only the input directory and earlier
//! stages' artifact directories, and writes only into its own directory.

use super::config::*;
use crate::crowd::{self, CrowdStore, ExportDocument, VoteTally, VoteTask};
use crate::dedup::{self, DedupGroup};
use crate::detect::adapter::{self, ManifestItem};
use crate::detect::{canonical_class, Detection, NEGATIVE_CLASS};
use crate::fuse::{self, FusedLabel};
use crate::imaging::{self, CropOrigin, CropRecord, ProfileSet, SegmentParams};
use crate::ingest::{self, AnalyzeOptions, Batch, ImageRecord};
use crate::output::{self, ImageEntry};
use crate::region::{Frame, Region};
use crate::jsonl;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub type StageError = Box<dyn std::error::Error + Send + Sync>;
pub type StageResult = Result<StageOutput, StageError>;

pub const RECORDS: &str = "records.jsonl";
pub const SKIPPED: &str = "skipped.jsonl";
pub const BATCHES: &str = "batches.jsonl";
pub const IMAGES: &str = "images.jsonl";
pub const REGIONS: &str = "regions.jsonl";
pub const CROPS: &str = "crops.jsonl";
pub const CROP_DIR: &str = "crops";
pub const DEBUG_DIR: &str = "debug";
pub const DETECTIONS: &str = "detections.jsonl";
pub const GROUPS: &str = "groups.jsonl";
pub const TASKS: &str = "tasks.jsonl";
pub const TALLIES: &str = "tallies.jsonl";
pub const EXPORT: &str = "export.json";
pub const BACKMAPPED: &str = "backmapped.jsonl";
pub const FUSED: &str = "fused.jsonl";
pub const HARD_LABELS: &str = "hard_labels.jsonl";
pub const REVIEW_JSON: &str = "review.json";
pub const REVIEW_MD: &str = "review.md";
pub const LABEL_DIR: &str = "labels";
pub const SOFT_DIR: &str = "soft";
/// Vote store shared by every run of this run directory; deliberately
/// outside any stage directory so resuming never discards votes.
pub const CROWD_DIR: &str = "crowd";

#[derive(Debug, Default)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub counts: BTreeMap<String, u64>,
}

impl StageOutput {
    fn file(&mut self, p: PathBuf) -> &mut Self {
        self.artifacts.push(p);
        self
    }

    fn count(&mut self, name: &str, n: usize) -> &mut Self {
        self.counts.insert(name.to_string(), n as u64);
        self
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Message(pub String);

fn fail<T>(msg: impl Into<String>) -> Result<T, StageError> {
    Err(Box::new(Message(msg.into())))
}

pub struct StageCtx<'a> {
    pub config: &'a PipelineConfig,
    pub run_dir: PathBuf,
    pub index: usize,
    pub dir: PathBuf,
}

impl StageCtx<'_> {
    pub fn spec(&self) -> &StageSpec {
        &self.config.stages[self.index]
    }

    fn earlier(&self, kind: StageKind) -> impl Iterator<Item = &StageSpec> {
        self.config.stages[..self.index].iter().filter(move |s| s.kind == kind)
    }

    fn latest(&self, kind: StageKind) -> Option<&StageSpec> {
        self.earlier(kind).last()
    }

    fn stage_dir(&self, spec: &StageSpec) -> PathBuf {
        self.run_dir.join(&spec.key)
    }

    fn read_latest<T: DeserializeOwned>(&self, kind: StageKind, file: &str) -> Result<Option<Vec<T>>, StageError> {
        match self.latest(kind) {
            Some(s) => Ok(Some(jsonl::read(&self.stage_dir(s).join(file))?)),
            None => Ok(None),
        }
    }

    fn read_all<T: DeserializeOwned>(&self, kind: StageKind, file: &str) -> Result<Vec<T>, StageError> {
        let mut out = Vec::new();
        for s in self.earlier(kind) {
            let p = self.stage_dir(s).join(file);
            if p.exists() {
                out.extend(jsonl::read::<T>(&p)?);
            }
        }
        Ok(out)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.run_dir)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn write<T: Serialize>(&self, out: &mut StageOutput, file: &str, items: &[T]) -> Result<(), StageError> {
        let p = self.dir.join(file);
        jsonl::write(&p, items)?;
        out.file(p);
        Ok(())
    }

    fn records(&self) -> Result<Vec<ImageRecord>, StageError> {
        self.read_latest(StageKind::Analysis, RECORDS)?
            .ok_or_else(|| Message("no analysis stage ran before this one".into()).into())
    }

    /// Path each image should be read from: the preprocessed copy when a
    /// preprocessing stage ran, the source file otherwise.
    fn image_sources(&self, records: &[ImageRecord]) -> Result<BTreeMap<String, PathBuf>, StageError> {
        let mut m: BTreeMap<String, PathBuf> = records.iter().map(|r| (r.image_id.clone(), r.path.clone())).collect();
        if let Some(entries) = self.read_latest::<PreparedImage>(StageKind::Preprocessing, IMAGES)? {
            for e in entries {
                let p = if e.path.is_absolute() { e.path } else { self.run_dir.join(e.path) };
                m.insert(e.image_id, p);
            }
        }
        Ok(m)
    }

    fn all_crops(&self) -> Result<Vec<CropRecord>, StageError> {
        let mut crops: Vec<CropRecord> = self.read_all(StageKind::Segmentation, CROPS)?;
        crops.extend(self.read_all::<CropRecord>(StageKind::Detection, CROPS)?);
        crops.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
        Ok(crops)
    }

    fn crop_prefix(&self, letter: char) -> String {
        match self.spec().instance {
            1 => letter.to_string(),
            n => format!("{letter}{n}_"),
        }
    }
}

fn open_rgb(path: &Path) -> Result<image::RgbImage, StageError> {
    Ok(image::open(path)
        .map_err(|e| Message(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8())
}

fn image_index(records: &[ImageRecord]) -> BTreeMap<&str, usize> {
    records.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect()
}

// ---- ① analysis ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub path: PathBuf,
    pub error: String,
}

pub fn analysis(ctx: &StageCtx, p: &AnalysisParams) -> StageResult {
    let input = ctx.config.input_dir();
    let exts = &ctx.config.raw.general.file_extensions;
    let frame_roots: Vec<PathBuf> = p.frame_dirs.iter().map(|f| input.join(&f.dir)).collect();
    let files: Vec<(String, PathBuf)> = ingest::scan_inputs(&input, exts)?
        .into_iter()
        .filter(|(_, path)| !frame_roots.iter().any(|r| path.starts_with(r)))
        .collect();
    let options = AnalyzeOptions {
        subsecond_pattern: p.subsecond_pattern.as_deref().map(regex::Regex::new).transpose()?,
    };
    let results: Vec<Result<ImageRecord, SkippedImage>> = files
        .par_iter()
        .map(|(id, path)| {
            ingest::analyze_image(path, id, &options).map_err(|e| SkippedImage {
                image_id: id.clone(),
                path: path.clone(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.error);
                skipped.push(s);
            }
        }
    }
    for f in &p.frame_dirs {
        let prefix = f.dir.to_string_lossy().replace('\\', "/");
        for mut rec in ingest::ingest_video_frames(&input.join(&f.dir), f.fps, f.start, exts)? {
            rec.image_id = format!("{}/{}", prefix.trim_end_matches('/'), rec.image_id);
            records.push(rec);
        }
    }
    if records.is_empty() {
        return fail(format!("no decodable images with extensions {exts:?} under {}", input.display()));
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut out = StageOutput::default();
    ctx.write(&mut out, RECORDS, &records)?;
    ctx.write(&mut out, SKIPPED, &skipped)?;
    out.count("records", records.len()).count("skipped", skipped.len());
    Ok(out)
}

// ---- ② batching ----

pub fn batching(ctx: &StageCtx, p: &BatchingParams) -> StageResult {
    let records = ctx.records()?;
    let batches = ingest::split_batches(&records, p.gap_seconds);
    let mut out = StageOutput::default();
    ctx.write(&mut out, BATCHES, &batches)?;
    out.count("batches", batches.len()).count("images", records.len());
    Ok(out)
}

// ---- ③ preprocessing ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedImage {
    pub image_id: String,
    /// Source file, or a corrected copy relative to the run directory.
    pub path: PathBuf,
    pub corrected: bool,
}

pub fn preprocessing(ctx: &StageCtx, p: &PreprocessParams) -> StageResult {
    let records = ctx.records()?;
    let profiles = match &p.profiles {
        Some(path) => ProfileSet::load(&ctx.config.resolve(path))?,
        None => ProfileSet::default(),
    };
    let img_dir = ctx.dir.join("images");
    let prepared: Vec<Result<PreparedImage, StageError>> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let profile = profiles.resolve(r.camera_serial.as_deref(), p.strict)?;
            if profile.is_identity() {
                return Ok(PreparedImage {
                    image_id: r.image_id.clone(),
                    path: r.path.clone(),
                    corrected: false,
                });
            }
            let img = open_rgb(&r.path)?;
            let fixed = imaging::preprocess(&img, &profile);
            std::fs::create_dir_all(&img_dir)?;
            let file = img_dir.join(format!("{i:05}.png"));
            fixed.save(&file)?;
            Ok(PreparedImage {
                image_id: r.image_id.clone(),
                path: PathBuf::from(ctx.rel(&file)),
                corrected: true,
            })
        })
        .collect();
    let prepared: Vec<PreparedImage> = prepared.into_iter().collect::<Result<_, _>>()?;
    let corrected = prepared.iter().filter(|p| p.corrected).count();
    let mut out = StageOutput::default();
    ctx.write(&mut out, IMAGES, &prepared)?;
    if corrected > 0 {
        out.file(img_dir);
    }
    out.count("images", prepared.len()).count("corrected", corrected);
    Ok(out)
}

// ---- ④ segmentation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionsRecord {
    pub image_id: String,
    pub regions: Vec<Region>,
}

fn save_crop(img: &image::RgbImage, path: &Path) -> Result<(), StageError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn segmentation(ctx: &StageCtx, p: &SegmentParams) -> StageResult {
    let records = ctx.records()?;
    let batches: Vec<Batch> = ctx
        .read_latest(StageKind::Batching, BATCHES)?
        .ok_or_else(|| Message("no batching stage ran before segmentation".into()))?;
    let sources = ctx.image_sources(&records)?;
    let index = image_index(&records);
    let prefix = ctx.crop_prefix('s');
    let crop_dir = ctx.dir.join(CROP_DIR);
    let debug_dir = ctx.dir.join(DEBUG_DIR);
    let debug = ctx.spec().debug_images;
    let segmenter = p.method.as_str();

    type BatchResult = (Vec<RegionsRecord>, Vec<CropRecord>, Vec<String>);
    let per_batch: Vec<Result<BatchResult, StageError>> = batches
        .par_iter()
        .map(|b| {
            let mut frames = Vec::with_capacity(b.member_ids.len());
            let mut skipped = Vec::new();
            for id in &b.member_ids {
                match open_rgb(&sources[id]) {
                    Ok(img) => frames.push((id.clone(), img)),
                    Err(e) => {
                        log::warn!("segmentation: {e}");
                        skipped.push(id.clone());
                    }
                }
            }
            let seg = imaging::segment(&frames, p);
            skipped.extend(seg.skipped.iter().cloned());
            let by_id: BTreeMap<&str, &image::RgbImage> = frames.iter().map(|(id, img)| (id.as_str(), img)).collect();
            let mut regions = Vec::new();
            let mut crops = Vec::new();
            for fr in seg.frames {
                let n = index[fr.image_id.as_str()];
                if debug {
                    save_crop(&image::DynamicImage::ImageLuma8(fr.mask.clone()).to_rgb8(), &debug_dir.join(format!("{n:05}.png")))?;
                }
                let img = by_id[fr.image_id.as_str()];
                for (k, (r, (crop, frame))) in fr
                    .regions
                    .iter()
                    .zip(imaging::extract_crops(img, &fr.image_id, &fr.regions, p.crop_long_side))
                    .enumerate()
                {
                    let crop_id = format!("{prefix}{n:05}-{k:02}");
                    let file = crop_dir.join(format!("{crop_id}.png"));
                    save_crop(&crop, &file)?;
                    crops.push(CropRecord {
                        crop_id,
                        parent_image_id: fr.image_id.clone(),
                        file: ctx.rel(&file),
                        width: crop.width(),
                        height: crop.height(),
                        region: r.clone(),
                        frame,
                        origin: CropOrigin::Segmenter {
                            segmenter: segmenter.to_string(),
                        },
                    });
                }
                regions.push(RegionsRecord {
                    image_id: fr.image_id,
                    regions: fr.regions,
                });
            }
            Ok((regions, crops, skipped))
        })
        .collect();
    let mut regions = Vec::new();
    let mut crops = Vec::new();
    let mut skipped = Vec::new();
    for r in per_batch {
        let (a, b, c) = r?;
        regions.extend(a);
        crops.extend(b);
        skipped.extend(c);
    }
    for s in &skipped {
        log::warn!("segmentation skipped {s}");
    }
    regions.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    crops.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    let mut out = StageOutput::default();
    ctx.write(&mut out, REGIONS, &regions)?;
    ctx.write(&mut out, CROPS, &crops)?;
    out.file(crop_dir);
    if debug {
        out.file(debug_dir);
    }
    out.count("frames", regions.len())
        .count("regions", regions.iter().map(|r| r.regions.len()).sum())
        .count("crops", crops.len())
        .count("skipped", skipped.len());
    Ok(out)
}

// ---- ⑤ detection ----

pub fn detection(ctx: &StageCtx, p: &DetectionParams) -> StageResult {
    let records = ctx.records()?;
    let sources = ctx.image_sources(&records)?;
    let mut manifest = Vec::new();
    if p.full_frames {
        for r in &records {
            manifest.push(ManifestItem {
                id: r.image_id.clone(),
                path: sources[&r.image_id].clone(),
                width: r.width,
                height: r.height,
                frame: Frame::Original,
            });
        }
    }
    if p.crops {
        let seg_crops: Vec<CropRecord> = ctx.read_all(StageKind::Segmentation, CROPS)?;
        for c in seg_crops {
            manifest.push(ManifestItem {
                id: c.crop_id.clone(),
                path: ctx.run_dir.join(&c.file),
                width: c.width,
                height: c.height,
                frame: c.frame.clone(),
            });
        }
    }
    let model_id = match ctx.spec().instance {
        1 => p.adapter.model_id(),
        n => format!("{}#{n}", p.adapter.model_id()),
    };
    let opts = adapter::RunOptions {
        batch_size: p.batch_size,
        parallel: p.parallel,
        model_id: model_id.clone(),
        class_map: p.class_map.clone(),
    };
    let detections = adapter::run_detector(&manifest, &p.adapter, ctx.config.classes(), &opts)?;

    let mut crops = Vec::new();
    let crop_dir = ctx.dir.join(CROP_DIR);
    if p.detection_crops {
        let index = image_index(&records);
        let dims: BTreeMap<&str, (u32, u32)> = records.iter().map(|r| (r.image_id.as_str(), (r.width, r.height))).collect();
        let mut per_image: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
        for d in &detections {
            if d.region.frame.is_original() && canonical_class(&d.top_class) != NEGATIVE_CLASS {
                per_image.entry(d.subject.as_str()).or_default().push(d);
            }
        }
        let prefix = ctx.crop_prefix('d');
        let made: Vec<Result<Vec<CropRecord>, StageError>> = per_image
            .par_iter()
            .map(|(image_id, dets)| {
                let img = open_rgb(&sources[*image_id])?;
                let (w, h) = dims[image_id];
                let n = index[image_id];
                let mut out = Vec::new();
                for (k, d) in dets.iter().enumerate() {
                    let region = d.region.padded(p.crop_pad_px, w, h);
                    let (crop, frame) = imaging::extract_crop(&img, image_id, &region, p.crop_long_side);
                    let crop_id = format!("{prefix}{n:05}-{k:02}");
                    let file = crop_dir.join(format!("{crop_id}.png"));
                    save_crop(&crop, &file)?;
                    out.push(CropRecord {
                        crop_id,
                        parent_image_id: image_id.to_string(),
                        file: ctx.rel(&file),
                        width: crop.width(),
                        height: crop.height(),
                        region,
                        frame,
                        origin: CropOrigin::Detector {
                            model_id: model_id.clone(),
                        },
                    });
                }
                Ok(out)
            })
            .collect();
        for m in made {
            crops.extend(m?);
        }
        crops.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    }

    let mut out = StageOutput::default();
    ctx.write(&mut out, DETECTIONS, &detections)?;
    ctx.write(&mut out, CROPS, &crops)?;
    if !crops.is_empty() {
        out.file(crop_dir);
    }
    out.count("manifest", manifest.len())
        .count("detections", detections.len())
        .count("crops", crops.len());
    Ok(out)
}

// ---- ⑥ duplicates ----

pub fn duplicates(ctx: &StageCtx, p: &DuplicatesParams) -> StageResult {
    let crops = ctx.all_crops()?;
    let hashes: Vec<Result<(String, u64), StageError>> = crops
        .par_iter()
        .map(|c| Ok((c.crop_id.clone(), dedup::dhash(&open_rgb(&ctx.run_dir.join(&c.file))?))))
        .collect();
    let hashes: Vec<(String, u64)> = hashes.into_iter().collect::<Result<_, _>>()?;
    let groups = dedup::group_duplicates(&hashes, p.threshold_bits);
    let mut out = StageOutput::default();
    ctx.write(&mut out, GROUPS, &groups)?;
    out.count("crops", crops.len())
        .count("groups", groups.len())
        .count("duplicates", crops.len() - groups.len());
    Ok(out)
}

// ---- ⑦ evaluation ----

pub fn evaluation(ctx: &StageCtx, p: &EvaluationParams) -> StageResult {
    let groups: Vec<DedupGroup> = ctx.read_latest(StageKind::Duplicates, GROUPS)?.unwrap_or_default();
    let crops = ctx.all_crops()?;
    let detections: Vec<Detection> = ctx.read_all(StageKind::Detection, DETECTIONS)?;
    let tasks: Vec<VoteTask> = if p.mode == EvaluationMode::None {
        Vec::new()
    } else {
        crowd::publish_tasks(&groups, &crops, &detections, ctx.config.classes(), p.min_votes, &ctx.run_dir)?
    };
    let known: BTreeMap<&str, &CropRecord> = crops.iter().map(|c| (c.crop_id.as_str(), c)).collect();
    let mut out = StageOutput::default();
    let tallies: Vec<VoteTally> = match p.mode {
        EvaluationMode::None => Vec::new(),
        EvaluationMode::Replay => {
            let path = ctx.config.resolve(p.export.as_ref().expect("validated"));
            let text = std::fs::read_to_string(&path).map_err(|e| Message(format!("{}: {e}", path.display())))?;
            let mut tallies = crowd::import_results(&text)?;
            for t in &mut tallies {
                if !known.contains_key(t.crop_id.as_str()) {
                    return fail(format!("replayed tally {} refers to unknown crop {:?}", t.task_id, t.crop_id));
                }
                t.complete = t.total_votes >= p.min_votes;
            }
            tallies
        }
        EvaluationMode::Service => {
            let mut store = CrowdStore::open(&ctx.run_dir.join(CROWD_DIR))?;
            let fresh = store.publish(&tasks)?;
            out.count("published", fresh.len());
            let tallies: Vec<VoteTally> = tasks
                .iter()
                .map(|t| store.book().tally(&t.task_id).expect("just published"))
                .collect();
            let open = tallies.iter().filter(|t| !t.complete).count();
            if open > 0 && !p.allow_incomplete {
                return fail(format!(
                    "{open} of {} vote tasks still need votes; collect them with `shadowpipe serve` and resume from this stage",
                    tallies.len()
                ));
            }
            tallies
        }
    };
    let doc = ExportDocument::from_tallies(tallies.iter().map(|t| (t.clone(), p.min_votes)));
    ctx.write(&mut out, TASKS, &tasks)?;
    ctx.write(&mut out, TALLIES, &tallies)?;
    let export = ctx.dir.join(EXPORT);
    jsonl::write_atomic(&export, doc.to_json().as_bytes())?;
    out.file(export);
    out.count("tasks", tasks.len())
        .count("tallies", tallies.len())
        .count("complete", tallies.iter().filter(|t| t.complete).count());
    Ok(out)
}

// ---- ⑧ backmapping ----

pub fn backmapping(ctx: &StageCtx, _p: &BackmappingParams) -> StageResult {
    let records = ctx.records()?;
    let dims: BTreeMap<String, (u32, u32)> = records.iter().map(|r| (r.image_id.clone(), (r.width, r.height))).collect();
    let crops: BTreeMap<String, CropRecord> = ctx.all_crops()?.into_iter().map(|c| (c.crop_id.clone(), c)).collect();
    let groups: Vec<DedupGroup> = ctx.read_latest(StageKind::Duplicates, GROUPS)?.unwrap_or_default();
    let tallies: Vec<VoteTally> = ctx.read_latest(StageKind::Evaluation, TALLIES)?.unwrap_or_default();
    let mut detections: Vec<Detection> = ctx.read_all(StageKind::Detection, DETECTIONS)?;
    let n_det = detections.len();
    let crowd = fuse::crowd_detections(&tallies, &crops)?;
    let n_crowd = crowd.len();
    detections.extend(crowd);
    let back = fuse::backmap(&detections, &crops, &groups, &dims)?;
    let mut out = StageOutput::default();
    ctx.write(&mut out, BACKMAPPED, &back)?;
    out.count("detections", n_det).count("crowd", n_crowd).count("backmapped", back.len());
    Ok(out)
}

// ---- ⑨ decision ----

pub fn decision(ctx: &StageCtx, p: &DecisionParams) -> StageResult {
    let back: Vec<Detection> = ctx
        .read_latest(StageKind::Backmapping, BACKMAPPED)?
        .ok_or_else(|| Message("no backmapping stage ran before decision".into()))?;
    let fused = fuse::fuse_all(&back, &p.weights, p.merge_iou, p.fusion)?;
    let (hard, review) = fuse::apply_threshold(&fused, p.threshold);
    let mut out = StageOutput::default();
    ctx.write(&mut out, FUSED, &fused)?;
    ctx.write(&mut out, HARD_LABELS, &hard)?;
    if let Some(band) = p.review_band {
        let report = output::make_review_report(&fused, band, &ctx.all_crops()?)?;
        let json = ctx.dir.join(REVIEW_JSON);
        let md = ctx.dir.join(REVIEW_MD);
        jsonl::write_atomic(&json, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        jsonl::write_atomic(&md, report.to_markdown().as_bytes())?;
        out.file(json).file(md);
        out.count("flagged", report.items.len());
    }
    out.count("fused", fused.len()).count("hard", hard.len()).count("review", review.len());
    Ok(out)
}

// ---- ⑩ training data ----

pub fn training_data(ctx: &StageCtx, p: &TrainingDataParams) -> StageResult {
    let records = ctx.records()?;
    let decision_spec = ctx
        .latest(StageKind::Decision)
        .ok_or_else(|| Message("no decision stage ran before training_data".into()))?;
    let StageParams::Decision(dp) = &decision_spec.params else {
        unreachable!("decision stage carries decision params")
    };
    let dir = ctx.stage_dir(decision_spec);
    let fused: Vec<FusedLabel> = jsonl::read(&dir.join(FUSED))?;
    let hard: Vec<FusedLabel> = jsonl::read(&dir.join(HARD_LABELS))?;
    let images: Vec<ImageEntry> = records
        .iter()
        .map(|r| ImageEntry {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
        })
        .collect();
    let mut out = StageOutput::default();
    for f in &p.formats {
        match f {
            ExportFormat::Hard => {
                let d = ctx.dir.join(LABEL_DIR);
                let files = output::export_yolo(&hard, ctx.config.classes(), &images, &d, p.with_confidence)?;
                out.file(d).count("label_files", files.len()).count("hard_labels", hard.len());
            }
            ExportFormat::Soft => {
                let d = ctx.dir.join(SOFT_DIR);
                let files = output::export_soft(&fused, dp.threshold, &images, &d)?;
                out.file(d).count("soft_files", files.len()).count("soft_labels", fused.len());
            }
        }
    }
    let mut classes = String::new();
    for c in ctx.config.classes() {
        classes.push_str(c);
        classes.push('\n');
    }
    let cls = ctx.dir.join(output::yolo::CLASS_LIST);
    jsonl::write_atomic(&cls, classes.as_bytes())?;
    out.file(cls);
    Ok(out)
}

pub fn run_stage(ctx: &StageCtx) -> StageResult {
    match &ctx.spec().params {
        StageParams::Analysis(p) => analysis(ctx, p),
        StageParams::Batching(p) => batching(ctx, p),
        StageParams::Preprocessing(p) => preprocessing(ctx, p),
        StageParams::Segmentation(p) => segmentation(ctx, p),
        StageParams::Detection(p) => detection(ctx, p),
        StageParams::Duplicates(p) => duplicates(ctx, p),
        StageParams::Evaluation(p) => evaluation(ctx, p),
        StageParams::Backmapping(p) => backmapping(ctx, p),
        StageParams::Decision(p) => decision(ctx, p),
        StageParams::TrainingData(p) => training_data(ctx, p),
    }
}
