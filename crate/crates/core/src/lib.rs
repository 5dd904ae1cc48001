//! Region-guided report generation for volumetric scans.
//!
//! The crate is organised along the data path: [`volume`] and [`synth`] own the
//! on-disk data model, [`region`] turns a volume plus a region mask into encoder
//! inputs, [`encoders`] produce global and per-region embeddings, [`prompt`]
//! splices them into the decoder input and handles grounded report text,
//! [`decoder`] is the autoregressive language model, [`trainer`] runs the
//! region-report alignment training loop, and [`eval`] holds the metric suite.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod region;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
