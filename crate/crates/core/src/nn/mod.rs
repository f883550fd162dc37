//! The model family: convolution, group normalization, ReLU, max-pooling
//! and fully-connected layers, trained with cross-entropy.
//!
//! Per-sample gradients come from one backward pass per sample. Group
//! normalization uses per-sample statistics only, so a sample's logits and
//! gradient never depend on the rest of its batch.

mod grads;
mod layout;
mod model;
mod spec;

pub use grads::{ParamVec, PerSampleGrads};
pub use layout::{ParamInfo, ParamLayout, ParamRole};
pub use model::Model;
pub use spec::{LayerSpec, ModelSpec, GROUP_NORM_EPS};
