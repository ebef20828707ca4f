//! Dual-branch trajectory prediction with frequency-ordered selective
//! state-space models.
//!
//! The time branch runs an input-dependent selective scan over the observed
//! track; the frequency branch transforms the track to amplitude and phase
//! spectra, reorders them from low to high spectral radius, and scans them
//! with the same kind of recurrence. Cross-attention fuses both, and a set of
//! learnable queries decodes `K` weighted candidate futures.
//!
//! Everything is built on a small reverse-mode [`tape`] over dense
//! [`tensor::Tensor`]s.

pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod fd_branch;
pub mod frame;
pub mod gradcheck;
pub mod helix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use datagen::{Motif, MotifParams, Scenario, Split};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{CandidateSet, FoSS, FoSSConfig, LossBreakdown};
pub use params::{ParamId, ParamSpan, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{DType, Tensor};
pub use train::RunConfig;
