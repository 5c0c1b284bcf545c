//! Allocation-only core of a miniature class-incremental object detector.
//!
//! Everything in this crate is a pure function of its inputs: scene
//! synthesis into in-memory buffers, the detector forward/backward pass,
//! the detector and distillation losses, elastic response selection, NMS
//! and COCO-style evaluation. File formats, persistence, orchestration and
//! the command line live in the `erd` companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod assign;
pub mod decode;
pub mod detector;
pub mod distill;
mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod math;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod scene;

pub use error::{Error, Result};
