// SPDX-License-Identifier: Apache-2.0

//! Toy transformer encoder-decoder with a switchable decoder positional
//! encoding, hand-written backward pass, Adam training and checkpoints.

mod checkpoint;
mod config;
mod gradcheck;
mod infer;
mod loss;
mod network;
pub mod ops;
mod optim;
mod params;
mod posenc;
mod real;
mod train;

pub use checkpoint::{AnyModel, Checkpoint, RngState};
pub use config::{ModelConfig, PeMode, Precision};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use infer::{DecoderState, EncoderMemory};
pub use loss::smoothed_cross_entropy;
pub use network::{EncodedExample, Model};
pub use optim::{clip_global_norm, learning_rate, AdamState};
pub use params::{Layout, Slot};
pub use posenc::{lrpe, sinusoidal_pe};
pub use real::Real;
pub use train::{train_step, TrainConfig, Trainer};
