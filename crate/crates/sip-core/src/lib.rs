//! Non-intrusive speech-intelligibility prediction on frozen encoder-layer
//! features, with Mamba, transformer and LSTM temporal transform blocks in
//! both monaural and binaural configurations.
//!
//! The crate bundles its own substrate: a small dense-tensor library with
//! reverse-mode differentiation ([`tape`]), the selective state-space scan
//! with sequential and parallel-prefix execution ([`ssm`]), the block zoo
//! ([`blocks`]), model assembly ([`model`]), the training recipe
//! ([`train`]), binary/manifest persistence ([`data`]), metrics
//! ([`metrics`]) and the forward-scaling benchmark harness ([`bench`]).

// Index loops over multi-axis buffers and mixed-size parameter enums are
// the clearer shape for this numeric code.
#![allow(clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod real;
pub mod scan;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
