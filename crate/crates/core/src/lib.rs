//! Transient-fault resilience toolkit for small convolutional segmentation
//! networks.
//!
//! The crate trains a tiny encoder-decoder on a synthetic shapes dataset,
//! injects stripe and block faults into activation outputs, hardens the
//! activations (ReLU6, ReLUMax, AMMS masking) and scores each faulty
//! inference with an SDC severity class, mIoU and softmax-entropy
//! uncertainty metrics.

pub mod error;
pub mod faultsim;
pub mod hardening;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
pub use faultsim::{FaultDescriptor, InjectionPolicy};
pub use hardening::{ActivationKind, AmmsStats, HardeningState};
pub use metrics::{SdcClass, UncertaintyReport};
pub use segnet::{Model, ModelConfig};
pub use tensor::{ClassMap, Shape, Tensor};
