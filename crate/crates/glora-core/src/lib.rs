//! Generalized low-rank adaptation of frozen linear layers.
//!
//! One trainable support-tensor family per layer covers low-rank weight
//! deltas, scale/shift adaptation, and bias prompts; a weight-entangled
//! supernet trains all of them at once, an evolutionary search picks a
//! per-layer configuration, and an exact re-parameterization folds the chosen
//! adapters back into plain affine weights with zero inference overhead.

pub mod compat;
pub mod error;
pub mod evolution;
pub mod glora;
pub mod optim;
pub mod persist;
pub mod report;
pub mod supernet;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use evolution::{EvoOutcome, EvoSettings, FitnessRecord, Genome};
pub use glora::{
    GloraLinear, LayerConfig, LayerSearchSpace, MergedLinear, ModelConfig, SupportKind, SupportRole,
};
pub use supernet::{MergedModel, ModelKind, ToyModel, TrainSchedule};
pub use synth::{Dataset, ShiftKind, ShiftSpec, Split, TaskKind};
pub use tensor::{finite_difference_grad, DenseMatrix, ElemType, Scalar, Tape, ValueId};
