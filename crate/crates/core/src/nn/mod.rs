//! Point-displacement denoiser: a small transformer over NBV point sets.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod params;

pub use checkpoint::{
    config_hash, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointMeta, OptimizerState,
};
pub use model::{c_noise, forward, forward_points, loss_and_grad, loss_and_grad_per_set, noise_embedding, PointBatch};
pub use ops::Real;
pub use params::{init_weights, DenoiserConfig, DenoiserWeights, Layout, Profile, TensorSpec};
