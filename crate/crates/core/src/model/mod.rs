//! The Composer architecture: a stem, metalayers of interchangeable modules,
//! and a recurrent controller emitting one categorical routing decision per
//! metalayer.

mod checkpoint;
mod composer;
mod config;
pub mod presets;
mod routing;

pub use checkpoint::{from_bytes, load_model, save_model, to_bytes};
pub use composer::{Composer, ControllerState, ExampleTrace, Trajectory};
pub use config::{
    crop, mlp_param_count, ComposerConfig, ControllerConfig, Glimpse, MetalayerSpec, ModuleSpec,
};
pub use routing::{sample_choice, RouteMode};
