//! Continual multimodal learning with cluster-trained key-key prompt pools.
//!
//! Each task gets a pool of visual keys, textual keys and one prompt per key
//! pair. Keys are fitted with mini-batch K-means over the task's encoded
//! features and then frozen; prompts and a shared classifier are trained with
//! cross-entropy plus distillation against a snapshot of the previous model.

pub mod checkpoint;
pub mod continual;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod prompting;

pub use error::{Error, Result};
