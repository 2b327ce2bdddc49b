//! Differentiable building blocks: a fixed set of layers with hand-written
//! backward passes, the AdamW optimizer and a finite-difference checker.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod param;
pub mod sequential;

pub use gradcheck::{grad_check, grad_check_coords, layer_grad_error, random_layer_cases};
pub use layers::{layer_backward, layer_forward, Cache, Layer, LayerGrads, LayerKind};
pub use param::{adamw_step, value_digest, AdamW, Param};
pub use sequential::Sequential;
