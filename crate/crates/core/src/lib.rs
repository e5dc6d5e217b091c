//! Composer: modular networks whose per-input computation graph is chosen by
//! a learned controller, with test-time adjustable policy preferences.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`params`], [`tape`], [`gradcheck`]: dense `f64` arithmetic
//!   with tape-based reverse-mode differentiation.
//! * [`model`]: stem, metalayers of candidate modules, and the recurrent
//!   controller that samples one module per metalayer.
//! * [`preferences`]: glimpse and entropy preference costs and the train-time
//!   preference distributions.
//! * [`trainer`]: REINFORCE training with preference-augmented reward, plus an
//!   exact enumeration oracle for tiny models.
//! * [`data`]: IDX loading and Wide-MNIST synthesis.
//! * [`analysis`]: preference sweeps, random-mixing baseline, routing
//!   heatmaps, mutual information.

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod preferences;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use data::{Batch, LabeledDataset};
pub use error::{Error, Result};
pub use model::{
    load_model, save_model, Composer, ComposerConfig, ControllerConfig, ControllerState, Glimpse,
    MetalayerSpec, ModuleSpec, Trajectory,
};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use preferences::{GammaDistribution, PreferenceKind, PreferenceSpec, RewardBreakdown};
pub use tensor::Tensor;
pub use trainer::{Baseline, StepReport, TrainConfig, Trainer};
