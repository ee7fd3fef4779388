//! Camera-trap labelling pipeline: metadata ingest, background-subtraction
//! segmentation, detector adapter, near-duplicate grouping, crowd voting,
//! weighted fusion and training-data export.

pub mod crowd;
pub mod dedup;
pub mod engine;
pub mod detect;
pub mod fuse;
pub mod imaging;
pub mod ingest;
pub mod jsonl;
pub mod output;
pub mod region;
pub mod synth;

pub use region::{iou, Frame, Region};
