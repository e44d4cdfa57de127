//! Parametric variational linear units and the small CNN engine around them.
//!
//! `pvlu-core` is `no_std` (it needs `alloc`). Enable the default `std`
//! feature for runtime SIMD dispatch in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod activations;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod tensor;

pub use activations::{act_backward, act_forward, make_pvlu_params, ActivationKind, PvluInit};
pub use autodiff::{finite_diff, Graph, ParamId, ParamRole, ParamStore, Parameter};
pub use data::{AugmentConfig, Dataset, Split};
pub use error::{Error, Result};
pub use harness::{
    finetune, rel_error_decrease, summarize, train, Optimizer, Summary, TrainConfig, TrialResult,
};
pub use layers::{
    presets, ActivationSpec, FreezePolicy, LayerKind, LayerSpec, Mode, Model, ParamGroup,
};
pub use tensor::{conv2d, ew, matmul, maxpool2d, BinaryOp, Fill, Padding, Tensor};
