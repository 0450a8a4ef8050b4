//! The dVoxResNet classifier and its checkpoints.

mod checkpoint;
mod config;
pub mod layers;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, TransferReport, MAGIC, VERSION};
pub use config::{
    format_placement, parse_placement, ModelConfig, DEFORMABLE_CONV_SLOTS, DEFORMABLE_VOXRES_SLOTS,
};
pub use net::{Model, Stage};
