//! Exporters for finished labels and the evaluation harness.

pub mod eval;
pub mod report;
pub mod yolo;

pub use eval::{compute_report, evaluate, match_detections, match_labels, Counts, EvalReport, ImageFilter, LabelBox, MatchOutcome, Metrics};
pub use report::{decide, export_soft, make_review_report, Decision, ReviewItem, ReviewReport, SoftRecord};
pub use yolo::{export_yolo, label_path, parse_yolo_line, read_image_list, read_label_dir, yolo_line, ImageEntry};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("label class {class:?} on {image_id} is not in the class list")]
    UnknownClass { class: String, image_id: String },
    #[error("no dimensions known for image {0:?}")]
    MissingDims(String),
    #[error("review band [{0}, {1}] is not within 0 <= lo <= hi <= 1")]
    BadBand(f64, f64),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
