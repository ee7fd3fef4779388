//! Line-delimited JSON protocol to an external detector process.
//!
//! Requests go to the child's stdin as `{"id", "path"}` lines. The child
//! answers each request, in order, with `{"id", "boxes": [{"x","y","w","h",
//! "probs"}]}` and closes stdout when done.

use super::{mock, Detection, DetectionSource};
use crate::region::{Frame, Region};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub probs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    pub boxes: Vec<WireBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinAdapter {
    Mock,
}

/// Either a built-in adapter name or an argv to spawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdapterSpec {
    Builtin(BuiltinAdapter),
    Command(Vec<String>),
}

impl AdapterSpec {
    pub fn model_id(&self) -> String {
        match self {
            AdapterSpec::Builtin(BuiltinAdapter::Mock) => "mock".into(),
            AdapterSpec::Command(argv) => argv
                .first()
                .map(|p| {
                    std::path::Path::new(p)
                        .file_name()
                        .map(|f| f.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.clone())
                })
                .unwrap_or_default(),
        }
    }
}

/// One image or crop to run the detector on.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Frame that boxes on this item are expressed in.
    pub frame: Frame,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub batch_size: usize,
    /// Adapter processes run side by side over disjoint batches.
    pub parallel: usize,
    pub model_id: String,
    /// Renames adapter class names before validation, e.g. `target -> wolf`.
    pub class_map: BTreeMap<String, String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            parallel: 1,
            model_id: "mock".into(),
            class_map: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("empty detector manifest")]
    EmptyManifest,
    #[error("cannot start adapter {program:?}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter exited with {status}: {stderr}")]
    AdapterCrash { status: String, stderr: String },
    #[error("adapter protocol error at output line {line}: {message}")]
    Protocol { line: usize, message: String },
    #[error("invalid detection for {id}: {message}")]
    Validation { id: String, message: String },
    #[error("adapter i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Reads adapter output and pairs it with the requests, enforcing one
/// response per request in request order.
pub fn read_responses<R: BufRead>(reader: R, requests: &[WireRequest]) -> Result<Vec<WireResponse>, DetectError> {
    let mut out = Vec::with_capacity(requests.len());
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let resp: WireResponse = serde_json::from_str(&line).map_err(|e| DetectError::Protocol {
            line: lineno,
            message: e.to_string(),
        })?;
        let Some(req) = requests.get(out.len()) else {
            return Err(DetectError::Protocol {
                line: lineno,
                message: format!("unexpected extra response {:?}", resp.id),
            });
        };
        if resp.id != req.id {
            return Err(DetectError::Protocol {
                line: lineno,
                message: format!("expected response for {:?}, got {:?}", req.id, resp.id),
            });
        }
        out.push(resp);
    }
    if out.len() != requests.len() {
        return Err(DetectError::Protocol {
            line: out.len() + 1,
            message: format!("adapter closed output after {} of {} responses", out.len(), requests.len()),
        });
    }
    Ok(out)
}

fn run_process(argv: &[String], requests: &[WireRequest]) -> Result<Vec<WireResponse>, DetectError> {
    let (program, args) = argv.split_first().ok_or_else(|| DetectError::Spawn {
        program: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty adapter command"),
    })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| DetectError::Spawn {
            program: program.clone(),
            source,
        })?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let mut payload = Vec::new();
    for r in requests {
        serde_json::to_writer(&mut payload, r).expect("request serialises");
        payload.push(b'\n');
    }
    // writer on its own thread so a chatty adapter cannot deadlock us
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&payload);
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });

    let stdout = child.stdout.take().expect("piped stdout");
    let parsed = read_responses(BufReader::new(stdout), requests);
    if parsed.is_err() {
        // we stop listening; the protocol error is the root cause
        let _ = child.kill();
    }
    let status = child.wait()?;
    let _ = writer.join();
    let stderr_text = err_reader.join().unwrap_or_default();
    if parsed.is_ok() && !status.success() || parsed.is_err() && status.code().is_some_and(|c| c != 0) {
        let tail: Vec<&str> = stderr_text.lines().rev().take(5).collect();
        return Err(DetectError::AdapterCrash {
            status: status.to_string(),
            stderr: tail.into_iter().rev().collect::<Vec<_>>().join("\n"),
        });
    }
    parsed
}

fn run_builtin(items: &[ManifestItem]) -> Result<Vec<WireResponse>, DetectError> {
    items
        .iter()
        .map(|item| {
            let img = image::open(&item.path)
                .map_err(|e| DetectError::Validation {
                    id: item.id.clone(),
                    message: format!("cannot decode {}: {e}", item.path.display()),
                })?
                .to_rgb8();
            Ok(WireResponse {
                id: item.id.clone(),
                boxes: mock::mock_detect(&img),
            })
        })
        .collect()
}

/// Checks one box against the item's dimensions and the class list, and
/// turns it into a Detection.
pub fn validate_box(item: &ManifestItem, k: usize, b: &WireBox, classes: &BTreeSet<String>, model_id: &str) -> Result<Detection, DetectError> {
    let bad = |message: String| DetectError::Validation {
        id: item.id.clone(),
        message,
    };
    for (class, &p) in &b.probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(bad(format!(
                "probability {p} for class {class:?} outside the closed interval [0, 1]"
            )));
        }
        if !classes.contains(super::canonical_class(class)) {
            return Err(bad(format!("unknown class {class:?}")));
        }
    }
    if b.probs.is_empty() {
        return Err(bad("box without class probabilities".into()));
    }
    if b.x < 0 || b.y < 0 || b.w < 1 || b.h < 1 || b.x + b.w > item.width as i64 || b.y + b.h > item.height as i64 {
        return Err(bad(format!(
            "box ({},{},{},{}) outside {}x{} frame",
            b.x, b.y, b.w, b.h, item.width, item.height
        )));
    }
    let region = Region::new(b.x as u32, b.y as u32, b.w as u32, b.h as u32).with_frame(item.frame.clone());
    Ok(Detection::new(
        format!("{model_id}:{}:{k:03}", item.id),
        DetectionSource::Detector {
            model_id: model_id.to_string(),
        },
        item.id.clone(),
        region,
        b.probs.clone(),
    ))
}

/// Applies a class-name mapping; classes that collide keep the larger
/// probability.
pub fn rename_classes(b: &WireBox, map: &BTreeMap<String, String>) -> WireBox {
    let mut probs = BTreeMap::new();
    for (c, &p) in &b.probs {
        let name = map.get(c).unwrap_or(c).clone();
        let e = probs.entry(name).or_insert(p);
        *e = f64::max(*e, p);
    }
    WireBox { probs, ..b.clone() }
}

/// Runs the adapter over `manifest` in batches, validates every box and
/// returns detections in deterministic order. `classes` lists the real
/// classes; the negative class is always accepted.
pub fn run_detector(manifest: &[ManifestItem], adapter: &AdapterSpec, classes: &[String], opts: &RunOptions) -> Result<Vec<Detection>, DetectError> {
    if manifest.is_empty() {
        return Err(DetectError::EmptyManifest);
    }
    let mut known: BTreeSet<String> = classes.iter().cloned().collect();
    known.insert(super::NEGATIVE_CLASS.to_string());

    let batches: Vec<&[ManifestItem]> = manifest.chunks(opts.batch_size.max(1)).collect();
    let run_batch = |items: &[ManifestItem]| -> Result<Vec<Detection>, DetectError> {
        let responses = match adapter {
            AdapterSpec::Builtin(BuiltinAdapter::Mock) => run_builtin(items)?,
            AdapterSpec::Command(argv) => {
                let requests: Vec<WireRequest> = items
                    .iter()
                    .map(|i| WireRequest {
                        id: i.id.clone(),
                        path: i.path.display().to_string(),
                    })
                    .collect();
                run_process(argv, &requests)?
            }
        };
        let mut out = Vec::new();
        for (item, resp) in items.iter().zip(responses) {
            for (k, b) in resp.boxes.iter().enumerate() {
                let mapped;
                let b = if opts.class_map.is_empty() {
                    b
                } else {
                    mapped = rename_classes(b, &opts.class_map);
                    &mapped
                };
                out.push(validate_box(item, k, b, &known, &opts.model_id)?);
            }
        }
        Ok(out)
    };

    let results: Vec<Result<Vec<Detection>, DetectError>> = if opts.parallel > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| DetectError::Io(std::io::Error::other(e)))?;
        pool.install(|| batches.par_iter().map(|b| run_batch(b)).collect())
    } else {
        batches.iter().map(|b| run_batch(b)).collect()
    };
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    all.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn reqs(ids: &[&str]) -> Vec<WireRequest> {
        ids.iter()
            .map(|i| WireRequest {
                id: i.to_string(),
                path: format!("/x/{i}.png"),
            })
            .collect()
    }

    fn item(id: &str) -> ManifestItem {
        ManifestItem {
            id: id.into(),
            path: PathBuf::from("unused"),
            width: 100,
            height: 80,
            frame: Frame::Original,
        }
    }

    fn wire(x: i64, p: f64) -> WireBox {
        WireBox {
            x,
            y: 0,
            w: 10,
            h: 10,
            probs: BTreeMap::from([("wolf".to_string(), p)]),
        }
    }

    fn known() -> BTreeSet<String> {
        ["wolf", "nothing"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn responses_must_follow_request_order() {
        let out = "{\"id\":\"a\",\"boxes\":[]}\n\n{\"id\":\"b\",\"boxes\":[]}\n";
        assert_eq!(read_responses(Cursor::new(out), &reqs(&["a", "b"])).unwrap().len(), 2);
        let swapped = "{\"id\":\"b\",\"boxes\":[]}\n";
        assert!(matches!(
            read_responses(Cursor::new(swapped), &reqs(&["a", "b"])),
            Err(DetectError::Protocol { line: 1, .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let out = "{\"id\":\"a\",\"boxes\":[]}\n{\"id\": oops}\n";
        match read_responses(Cursor::new(out), &reqs(&["a", "b"])) {
            Err(DetectError::Protocol { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let out = "{\"id\":\"a\",\"boxes\":[]}\n";
        assert!(read_responses(Cursor::new(out), &reqs(&["a", "b"])).is_err());
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let err = validate_box(&item("a"), 0, &wire(0, 1.2), &known(), "m").unwrap_err();
        assert!(err.to_string().contains("closed interval [0, 1]"), "{err}");
        assert!(validate_box(&item("a"), 0, &wire(0, f64::NAN), &known(), "m").is_err());
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        assert!(validate_box(&item("a"), 0, &wire(95, 0.5), &known(), "m").is_err());
        assert!(validate_box(&item("a"), 0, &wire(-1, 0.5), &known(), "m").is_err());
        assert!(validate_box(&item("a"), 0, &wire(90, 0.5), &known(), "m").is_ok());
    }

    #[test]
    fn unknown_class_rejected_background_accepted() {
        let mut b = wire(0, 0.5);
        b.probs.insert("cat".into(), 0.1);
        assert!(validate_box(&item("a"), 0, &b, &known(), "m").is_err());
        let mut b = wire(0, 0.5);
        b.probs.insert("background".into(), 0.5);
        assert!(validate_box(&item("a"), 0, &b, &known(), "m").is_ok());
    }

    #[test]
    fn adapter_spec_forms() {
        let m: AdapterSpec = serde_json::from_str("\"mock\"").unwrap();
        assert_eq!(m, AdapterSpec::Builtin(BuiltinAdapter::Mock));
        let c: AdapterSpec = serde_json::from_str("[\"/usr/bin/yolo\", \"--fast\"]").unwrap();
        assert_eq!(c.model_id(), "yolo");
        assert!(serde_json::from_str::<AdapterSpec>("\"yolo\"").is_err());
    }

    #[test]
    fn empty_manifest_rejected() {
        assert!(matches!(
            run_detector(&[], &AdapterSpec::Builtin(BuiltinAdapter::Mock), &[], &RunOptions::default()),
            Err(DetectError::EmptyManifest)
        ));
    }

    mod fuzz {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // whatever the adapter says, nothing invalid gets through
            #[test]
            fn validation_is_total(x in -20i64..120, y in -20i64..100, w in -5i64..120, h in -5i64..100, p in -1.0f64..2.0, cls in prop::sample::select(vec!["wolf", "cat", "background"])) {
                let b = WireBox { x, y, w, h, probs: BTreeMap::from([(cls.to_string(), p)]) };
                if let Ok(d) = validate_box(&item("a"), 0, &b, &known(), "m") {
                    prop_assert!(d.region.fits(100, 80));
                    prop_assert!(d.region.w >= 1 && d.region.h >= 1);
                    prop_assert!(d.class_probs.values().all(|p| (0.0..=1.0).contains(p)));
                    prop_assert!(cls != "cat");
                }
            }
        }
    }
}
