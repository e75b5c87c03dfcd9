//! Desk-scale open-vocabulary semantic change detection on bi-temporal
//! image pairs: a frozen vision backbone with trainable cross-temporal
//! adapters, a text-prompted cost-volume head, binary and semantic change
//! decoders, a fully decoupled two-stage training loop, and
//! benchmark-protocol metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;

pub use autodiff::Tensor;
