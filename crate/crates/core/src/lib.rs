//! Multi-modal U-Net family segmentation.
//!
//! The crate covers the whole pipeline for paired-modality (jet
//! pseudo-colour + RGB) segmentation: network building blocks, bottleneck
//! fusion strategies, six assembled architectures, the weighted-BCE plus
//! Sobel edge objective, segmentation and detection metrics, dataset
//! ingestion and augmentation, and a k-fold training harness.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod training;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
pub use models::{build_model, Architecture, Model, ModelConfig, ModelInput};
pub use nn::Mode;
