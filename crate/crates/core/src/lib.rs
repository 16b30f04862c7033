//! Audio-visual deepfake detection with per-modality (dual) labels.
//!
//! The pipeline has two stages. Stage 1 pretrains unimodal encoders and a
//! joint decoder on audio-visual speech recognition with a CTC objective.
//! Stage 2 transfers that backbone, adds a modality compensation adapter and
//! a dual-label classifier, and finetunes on real/fake labels for audio and
//! video independently, with modality dropout so either stream may be
//! missing at inference time.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{AvdfError, Result};
pub use tensor::Matrix;
