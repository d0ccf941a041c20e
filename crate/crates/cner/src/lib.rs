//! Continual named-entity recognition engine.
//!
//! Trains a miniature transformer tagger over a sequence of entity-type
//! steps, balancing retention of old types against acquisition of new ones
//! via pooled attention distillation, Fisher-guided selective weight fusion,
//! and confidence-based pseudo-labeling. A slicing pipeline turns a single
//! corpus into per-step training slices, and span-level F1 reporting tracks
//! old/new/all performance per step.
//!
//! Start from the runnable examples (`cargo run --example continual_run`)
//! or the `cner` binary for the file-based workflow.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
