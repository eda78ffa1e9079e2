//! File formats, pipeline drivers, and the CLI for the ship-detection
//! toolkit. All algorithmic work lives in `shipdet-core`; this crate owns
//! everything that touches the filesystem: JSONL record and prediction
//! files, PGM images, model checkpoints, mask directories, report files,
//! and config snapshots.

pub mod checkpoint;
pub mod convert;
pub mod infer;
pub mod jsonl;
pub mod maskio;
pub mod predio;
pub mod report;
pub mod scripted;
pub mod snapshot;

pub use shipdet_core as core;
