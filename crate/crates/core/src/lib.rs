//! Decomposed-policy constrained cooperative multi-agent reinforcement learning.
//!
//! Each agent acts with `a_i = b_i + λ·g_i(...)`: a base policy `f_i` trained
//! for team reward and a deterministic perturbation `g_i` trained only to
//! push the team-average costs under their bounds.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod constraint;
pub mod critic;
pub mod env;
pub mod error;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod policy;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use nn::{Activation, Layer, Mlp};
pub use noise::OuProcess;
pub use optim::{AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::Trainer;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Mlp32 = Mlp<f32>;
pub type Mlp64 = Mlp<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
