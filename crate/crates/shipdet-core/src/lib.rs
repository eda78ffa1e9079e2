//! Core algorithms for a multi-source ship-detection toolkit.
//!
//! Everything in this crate is pure computation on in-memory values:
//! axis-aligned and oriented box geometry, the bracketed-coordinate answer
//! grammar, unified instruction-record construction, a small trainable
//! multimodal transformer with low-rank and bias/scale adapters, detection
//! AP evaluation, and box-prompted mask segmentation. File and process
//! concerns (JSONL, checkpoints, the CLI) live in the companion `shipdet`
//! crate.
//!
//! The crate is `no_std` + `alloc`; all floating-point work is `f64` and
//! every randomized component is seeded, so results are reproducible
//! bit-for-bit across runs and platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod labeling;
pub mod mat;
pub mod num;
pub mod raster;
pub mod rng;
pub mod seg;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
