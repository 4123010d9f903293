//! Self-supervised representation learning for bioacoustic recordings.
//!
//! A learnable sinc filterbank feeds a convolutional downsampler and a
//! transformer encoder. Pretraining distills an exponential-moving-average
//! teacher into a masked student; finetuning adds a framewise multi-label
//! head trained with focal loss; evaluation extracts events and scores them
//! with interpolated average precision.

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod frontend;
pub mod masking;
pub mod model;
pub mod network;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
