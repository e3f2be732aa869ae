//! Focal-loss training of small convolutional classifiers and stacked
//! ensembles over them.
//!
//! The crate covers the whole pipeline: a procedural image benchmark
//! ([`dataset`]), affine augmentation ([`augment`]), a convnet engine with
//! exact gradients ([`netcore`]), categorical focal loss ([`losses`]), Adam
//! with a ramp / sustain / decay schedule ([`optim`]), macro-F1 metrics
//! ([`metrics`]), probability fusion and a frozen-base meta-classifier
//! ([`fusion`]), and the training loops tying them together ([`trainer`]).

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
