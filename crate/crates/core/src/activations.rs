//! The ReLU family and the (parametric) variational linear unit.
//!
//! `VLU(x) = ReLU(x) + α·sin(βx)`. PVLU uses the same formula with one
//! `(α, β)` pair per channel. Every kind uses the step function `H` with
//! `H(0) = 0` as the derivative of its rectifier part, so `ReLU'(0) = 0`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.3;
pub const DEFAULT_ELU_A: f64 = 1.0;
pub const DEFAULT_SINE_RELU_EPS: f64 = 0.0025;
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// An activation with its parameter values.
///
/// Channel-wise kinds (`Prelu`, `Pvlu`) hold one value per channel; channels
/// are axis 1 of an `[N, C, ...]` input, or the only axis of a rank-1 input.
#[derive(Debug, Clone, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Elu { a: f64 },
    Prelu { slope: Vec<f64> },
    SineRelu { eps: f64 },
    Vlu { alpha: f64, beta: f64 },
    Pvlu { alpha: Vec<f64>, beta: Vec<f64> },
}

/// Starting values for fresh PVLU parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PvluInit {
    /// `α = 0, β = 1`: numerically identical to ReLU until trained.
    Finetune,
    /// `α = 0.5, β = 1`.
    Scratch,
    Custom {
        alpha: f64,
        beta: f64,
    },
}

impl PvluInit {
    pub fn values(self) -> (f64, f64) {
        match self {
            PvluInit::Finetune => (0.0, 1.0),
            PvluInit::Scratch => (0.5, 1.0),
            PvluInit::Custom { alpha, beta } => (alpha, beta),
        }
    }
}

/// Per-channel parameter gradients produced by [`act_backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelGrads {
    None,
    Prelu { slope: Vec<f64> },
    Pvlu { alpha: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrad {
    pub dz: Tensor,
    pub params: ChannelGrads,
}

#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
fn vlu(x: f64, alpha: f64, beta: f64) -> f64 {
    relu(x) + alpha * libm::sin(beta * x)
}

#[inline]
fn vlu_derivative(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * beta * libm::cos(beta * x) + heaviside(x)
}

pub fn make_pvlu_params(channels: usize, init: PvluInit) -> Result<ActivationKind> {
    if channels == 0 {
        return Err(contract_err!("PVLU needs at least one channel"));
    }
    let (a, b) = init.values();
    Ok(ActivationKind::Pvlu {
        alpha: vec![a; channels],
        beta: vec![b; channels],
    })
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leaky",
            ActivationKind::Elu { .. } => "elu",
            ActivationKind::Prelu { .. } => "prelu",
            ActivationKind::SineRelu { .. } => "sinerelu",
            ActivationKind::Vlu { .. } => "vlu",
            ActivationKind::Pvlu { .. } => "pvlu",
        }
    }

    /// Channel count for channel-wise kinds.
    pub fn channels(&self) -> Option<usize> {
        match self {
            ActivationKind::Prelu { slope } => Some(slope.len()),
            ActivationKind::Pvlu { alpha, .. } => Some(alpha.len()),
            _ => None,
        }
    }

    /// `f(x)` for an element of channel `c`.
    #[inline]
    pub fn value(&self, x: f64, c: usize) -> f64 {
        match self {
            ActivationKind::Relu => relu(x),
            ActivationKind::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Elu { a } => {
                if x > 0.0 {
                    x
                } else {
                    a * libm::expm1(x)
                }
            }
            ActivationKind::Prelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope[c] * x
                }
            }
            ActivationKind::SineRelu { eps } => {
                if x > 0.0 {
                    x
                } else {
                    eps * (libm::sin(x) - libm::cos(x))
                }
            }
            ActivationKind::Vlu { alpha, beta } => vlu(x, *alpha, *beta),
            ActivationKind::Pvlu { alpha, beta } => vlu(x, alpha[c], beta[c]),
        }
    }

    /// `∂f/∂x` for an element of channel `c`.
    #[inline]
    pub fn derivative(&self, x: f64, c: usize) -> f64 {
        match self {
            ActivationKind::Relu => heaviside(x),
            ActivationKind::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            ActivationKind::Elu { a } => {
                if x > 0.0 {
                    1.0
                } else {
                    a * libm::exp(x)
                }
            }
            ActivationKind::Prelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope[c]
                }
            }
            ActivationKind::SineRelu { eps } => {
                if x > 0.0 {
                    1.0
                } else {
                    eps * (libm::cos(x) + libm::sin(x))
                }
            }
            ActivationKind::Vlu { alpha, beta } => vlu_derivative(x, *alpha, *beta),
            ActivationKind::Pvlu { alpha, beta } => vlu_derivative(x, alpha[c], beta[c]),
        }
    }
}

/// Resolves `(channels, inner)` so that element `i` belongs to channel `(i / inner) % channels`.
fn channel_layout(kind: &ActivationKind, shape: &[usize]) -> Result<(usize, usize)> {
    let Some(channels) = kind.channels() else {
        return Ok((1, 1));
    };
    let found = match shape {
        [c] => *c,
        [_, c, ..] => *c,
        [] => {
            return Err(shape_err!(
                "{} needs a channel axis, got a scalar",
                kind.name()
            ))
        }
    };
    if found != channels {
        return Err(shape_err!(
            "{} has {channels} channels but input {shape:?} has {found}",
            kind.name()
        ));
    }
    let inner = if shape.len() >= 2 {
        shape[2..].iter().product()
    } else {
        1
    };
    Ok((channels, inner))
}

pub fn act_forward(kind: &ActivationKind, z: &Tensor) -> Result<Tensor> {
    let (channels, inner) = channel_layout(kind, z.shape())?;
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| kind.value(x, (i / inner) % channels))
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// Elementwise `∂f/∂z` (no upstream factor).
pub fn local_derivative(kind: &ActivationKind, z: &Tensor) -> Result<Tensor> {
    let (channels, inner) = channel_layout(kind, z.shape())?;
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| kind.derivative(x, (i / inner) % channels))
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// Backward pass of an activation.
///
/// For PVLU the per-channel sums are `dα = Σ g·sin(βz)` and
/// `dβ = Σ g·α·z·cos(βz)`.
pub fn act_backward(
    kind: &ActivationKind,
    z: &Tensor,
    upstream: &Tensor,
) -> Result<ActivationGrad> {
    if z.shape() != upstream.shape() {
        return Err(shape_err!(
            "activation upstream {:?} does not match input {:?}",
            upstream.shape(),
            z.shape()
        ));
    }
    let (channels, inner) = channel_layout(kind, z.shape())?;
    let mut dz = Vec::with_capacity(z.len());
    for (i, (&x, &g)) in z.data().iter().zip(upstream.data()).enumerate() {
        dz.push(g * kind.derivative(x, (i / inner) % channels));
    }
    let params = match kind {
        ActivationKind::Prelu { .. } => {
            let mut slope = vec![0.0; channels];
            for (i, (&x, &g)) in z.data().iter().zip(upstream.data()).enumerate() {
                if x <= 0.0 {
                    slope[(i / inner) % channels] += g * x;
                }
            }
            ChannelGrads::Prelu { slope }
        }
        ActivationKind::Pvlu { alpha, beta } => {
            let mut d_alpha = vec![0.0; channels];
            let mut d_beta = vec![0.0; channels];
            for (i, (&x, &g)) in z.data().iter().zip(upstream.data()).enumerate() {
                let c = (i / inner) % channels;
                let bx = beta[c] * x;
                d_alpha[c] += g * libm::sin(bx);
                d_beta[c] += g * alpha[c] * x * libm::cos(bx);
            }
            ChannelGrads::Pvlu {
                alpha: d_alpha,
                beta: d_beta,
            }
        }
        _ => ChannelGrads::None,
    };
    Ok(ActivationGrad {
        dz: Tensor::from_vec(z.shape(), dz)?,
        params,
    })
}
