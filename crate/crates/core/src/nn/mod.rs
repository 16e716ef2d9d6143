//! The differentiable point transformer: token embedder, encoder, decoder,
//! reconstruction head and classifier head, plus AdamW and snapshots.

mod adamw;
mod config;
pub mod forward;
mod model;
mod params;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use config::ModelConfig;
pub use model::{HeadMode, Net};
pub use params::{BlockIds, Group, GroupFilter, Layout, LinearIds, ModelParams, ParamTensor, SNAPSHOT_VERSION};
