//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Trainable parameters live in a
//! [`ParamStore`]; [`Graph::backward`] walks the tape in reverse and adds the
//! resulting gradients into the store.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::activations::{act_backward, act_forward, ActivationKind, ChannelGrads};
use crate::error::{contract_err, numeric_err, shape_err, Error, Result};
use crate::tensor::{
    conv2d, conv2d_grad_input, conv2d_grad_kernel, ew, matmul, matmul_nt, matmul_tn, maxpool2d,
    maxpool2d_grad, BinaryOp, Padding, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// What a parameter is for; freeze policies select on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    DenseWeight,
    DenseBias,
    ClassifierWeight,
    ClassifierBias,
    BatchNormScale,
    BatchNormShift,
    PreluSlope,
    PvluAlpha,
    PvluBeta,
    /// Free-standing parameters created outside a model.
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: ParamId,
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Registry of parameters, indexed by [`ParamId`] in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = value.zeros_like();
        self.params.push(Parameter {
            id,
            name: name.into(),
            role,
            value,
            grad,
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameter values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

pub type NodeId = usize;

/// Activation recorded on the tape; parameterised kinds refer to parameter nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum ActOp {
    Fixed(ActivationKind),
    Prelu { slope: NodeId },
    Pvlu { alpha: NodeId, beta: NodeId },
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Activation {
        input: NodeId,
        act: ActOp,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct BnSaved {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    inner: usize,
    /// Whether batch statistics were used (gradient flows through them).
    batch_stats: bool,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, when it was needed.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }
}

/// A recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Test hook: scales PVLU input gradients by 1.01 during backward.
    corrupt_pvlu_dz: bool,
}

const BN_EPS: f64 = 1e-5;

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] => Ok((*n, *c, rest.iter().product())),
        _ => Err(shape_err!("expected [N, C, ...], got {shape:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes [`Graph::backward`] return wrong PVLU input gradients, for
    /// checking that the gradient checker notices.
    #[doc(hidden)]
    pub fn inject_pvlu_dz_fault(&mut self) {
        self.corrupt_pvlu_dz = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.nodes.len()) {
            Some(i) => Err(Error::State(alloc::format!("node {i} is not on this tape"))),
            None => Ok(()),
        }
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Input whose gradient is wanted (diagnostics, tests).
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        self.nodes.len() - 1
    }

    /// Leaf for a stored parameter. Frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a + b` where `b` matches `a` or is a `[C]` vector along axis 1.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let channel = sb.len() == 1 && sa.len() >= 2 && sa[1] == sb[0];
        if sa != sb && !channel {
            return Err(shape_err!("add: cannot combine {sa:?} with {sb:?}"));
        }
        let v = ew(self.value(a), self.value(b), BinaryOp::Add)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of same-shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let v = ew(self.value(a), self.value(b), BinaryOp::Mul)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(&[a])?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(v, Op::Sum(a), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(&[a])?;
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.check(&[input, kernel])?;
        let v = conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.check(&[input])?;
        let (v, argmax) = maxpool2d(self.value(input), window, stride)?;
        Ok(self.push(v, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn activation(&mut self, input: NodeId, act: ActOp) -> Result<NodeId> {
        let mut deps = vec![input];
        match &act {
            ActOp::Fixed(_) => {}
            ActOp::Prelu { slope } => deps.push(*slope),
            ActOp::Pvlu { alpha, beta } => deps.extend([*alpha, *beta]),
        }
        self.check(&deps)?;
        let kind = self.resolve(&act)?;
        let v = act_forward(&kind, self.value(input))?;
        Ok(self.push(v, Op::Activation { input, act }, &deps))
    }

    /// The concrete activation (with current parameter values) behind an [`ActOp`].
    pub fn resolve(&self, act: &ActOp) -> Result<ActivationKind> {
        let vector = |id: NodeId| -> Result<Vec<f64>> {
            let t = self.value(id);
            if t.rank() != 1 {
                return Err(shape_err!(
                    "activation parameter must be rank 1, got {:?}",
                    t.shape()
                ));
            }
            Ok(t.data().to_vec())
        };
        Ok(match act {
            ActOp::Fixed(kind) => kind.clone(),
            ActOp::Prelu { slope } => ActivationKind::Prelu {
                slope: vector(*slope)?,
            },
            ActOp::Pvlu { alpha, beta } => ActivationKind::Pvlu {
                alpha: vector(*alpha)?,
                beta: vector(*beta)?,
            },
        })
    }

    /// Multiply by a precomputed mask (already scaled by `1/(1-rate)`).
    pub fn dropout(&mut self, input: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.check(&[input])?;
        if mask.len() != self.value(input).len() {
            return Err(shape_err!(
                "dropout mask length {} for {:?}",
                mask.len(),
                self.value(input).shape()
            ));
        }
        let x = self.value(input);
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::from_vec(x.shape(), data)?;
        Ok(self.push(v, Op::Dropout { input, mask }, &[input]))
    }

    /// Per-channel batch normalisation.
    ///
    /// With `running == None` the batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as constants.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        self.check(&[input, gamma, beta])?;
        let x = self.value(input);
        let (n, channels, inner) = channel_layout(x.shape())?;
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(shape_err!(
                "batchnorm parameters must have shape [{channels}]"
            ));
        }
        let m = (n * inner) as f64;
        let (mean, var, stats) = match running {
            Some((mean, var)) => {
                if mean.len() != channels || var.len() != channels {
                    return Err(shape_err!(
                        "batchnorm running stats must have length {channels}"
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for (i, &v) in x.data().iter().enumerate() {
                    mean[(i / inner) % channels] += v;
                }
                mean.iter_mut().for_each(|s| *s /= m);
                for (i, &v) in x.data().iter().enumerate() {
                    let c = (i / inner) % channels;
                    var[c] += (v - mean[c]) * (v - mean[c]);
                }
                var.iter_mut().for_each(|s| *s /= m);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let c = (i / inner) % channels;
            let h = (v - mean[c]) * inv_std[c];
            x_hat.push(h);
            out.push(g[c] * h + b[c]);
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let saved = BnSaved {
            x_hat,
            inv_std,
            channels,
            inner,
            batch_stats: stats.is_some(),
        };
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            &[input, gamma, beta],
        );
        Ok((id, stats))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels (scalar).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(&[logits])?;
        let z = self.value(logits);
        let &[n, k] = z.shape() else {
            return Err(shape_err!(
                "cross-entropy expects [N, K] logits, got {:?}",
                z.shape()
            ));
        };
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract_err!("label {bad} outside [0, {k})"));
        }
        let probs = softmax_rows(z.data(), k);
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z.data()[row * k..(row + 1) * k];
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(zr.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            loss += lse - zr[label];
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients for trainable parameters are added into `store` and also
    /// returned. Calling this twice accumulates twice.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        self.check(&[loss])?;
        let seed = self.value(loss);
        if seed.len() != 1 || seed.rank() > 1 {
            return Err(contract_err!(
                "loss must be a scalar, got shape {:?}",
                seed.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(seed.shape(), vec![1.0])?);
        let mut params = BTreeMap::new();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            if let Op::Param(pid) = node.op {
                params
                    .entry(pid)
                    .and_modify(|acc: &mut Tensor| {
                        acc.add_assign(&g).expect("same parameter shape")
                    })
                    .or_insert_with(|| g.clone());
            }
            grads[id] = Some(g);
        }

        for (pid, g) in &params {
            let p = store.get_mut(*pid);
            if p.value.shape() != g.shape() {
                return Err(Error::State(alloc::format!(
                    "parameter {} changed shape since forward",
                    p.name
                )));
            }
            p.grad.add_assign(g)?;
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |target: NodeId, t: Tensor| -> Result<()> {
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(*a, matmul_nt(g, self.value(*b))?)?;
                }
                if self.wants(*b) {
                    send(*b, matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone())?;
                }
                if self.wants(*b) {
                    let sb = self.value(*b).shape();
                    if sb == g.shape() {
                        send(*b, g.clone())?;
                    } else {
                        let (_, channels, inner) = channel_layout(g.shape())?;
                        let mut acc = vec![0.0; channels];
                        for (i, &v) in g.data().iter().enumerate() {
                            acc[(i / inner) % channels] += v;
                        }
                        send(*b, Tensor::from_vec(sb, acc)?)?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, ew(g, self.value(*b), BinaryOp::Mul)?)?;
                }
                if self.wants(*b) {
                    send(*b, ew(g, self.value(*a), BinaryOp::Mul)?)?;
                }
            }
            Op::Sum(a) => {
                let gs = g.item()?;
                send(*a, self.value(*a).map(|_| gs))?;
            }
            Op::Reshape(a) => {
                send(*a, g.clone().reshape(self.value(*a).shape())?)?;
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                if self.wants(*input) {
                    let x_shape = self.value(*input).shape();
                    send(
                        *input,
                        conv2d_grad_input(g, self.value(*kernel), x_shape, *stride, *padding)?,
                    )?;
                }
                if self.wants(*kernel) {
                    let k_shape = self.value(*kernel).shape();
                    send(
                        *kernel,
                        conv2d_grad_kernel(self.value(*input), g, k_shape, *stride, *padding)?,
                    )?;
                }
            }
            Op::MaxPool { input, argmax } => {
                send(
                    *input,
                    maxpool2d_grad(g, argmax, self.value(*input).shape())?,
                )?;
            }
            Op::Activation { input, act } => {
                let kind = self.resolve(act)?;
                let mut grad = act_backward(&kind, self.value(*input), g)?;
                if self.corrupt_pvlu_dz && matches!(kind, ActivationKind::Pvlu { .. }) {
                    grad.dz = grad.dz.scale(1.01);
                }
                if self.wants(*input) {
                    send(*input, grad.dz)?;
                }
                match (act, grad.params) {
                    (ActOp::Prelu { slope }, ChannelGrads::Prelu { slope: ds })
                        if self.wants(*slope) =>
                    {
                        let n = ds.len();
                        send(*slope, Tensor::from_vec(&[n], ds)?)?;
                    }
                    (
                        ActOp::Pvlu { alpha, beta },
                        ChannelGrads::Pvlu {
                            alpha: da,
                            beta: db,
                        },
                    ) => {
                        let n = da.len();
                        if self.wants(*alpha) {
                            send(*alpha, Tensor::from_vec(&[n], da)?)?;
                        }
                        if self.wants(*beta) {
                            send(*beta, Tensor::from_vec(&[n], db)?)?;
                        }
                    }
                    _ => {}
                }
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                send(*input, Tensor::from_vec(g.shape(), data)?)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let BnSaved {
                    x_hat,
                    inv_std,
                    channels,
                    inner,
                    batch_stats,
                } = saved;
                let (channels, inner) = (*channels, *inner);
                let gv = self.value(*gamma).data();
                let mut d_gamma = vec![0.0; channels];
                let mut d_beta = vec![0.0; channels];
                for (i, (&gi, &h)) in g.data().iter().zip(x_hat).enumerate() {
                    let c = (i / inner) % channels;
                    d_gamma[c] += gi * h;
                    d_beta[c] += gi;
                }
                if self.wants(*input) {
                    let dx: Vec<f64> = if *batch_stats {
                        let m = (g.len() / channels) as f64;
                        g.data()
                            .iter()
                            .zip(x_hat)
                            .enumerate()
                            .map(|(i, (&gi, &h))| {
                                let c = (i / inner) % channels;
                                gv[c] * inv_std[c] / m * (m * gi - d_beta[c] - h * d_gamma[c])
                            })
                            .collect()
                    } else {
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| {
                                let c = (i / inner) % channels;
                                gi * gv[c] * inv_std[c]
                            })
                            .collect()
                    };
                    send(*input, Tensor::from_vec(g.shape(), dx)?)?;
                }
                if self.wants(*gamma) {
                    send(*gamma, Tensor::from_vec(&[channels], d_gamma)?)?;
                }
                if self.wants(*beta) {
                    send(*beta, Tensor::from_vec(&[channels], d_beta)?)?;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gs = g.item()?;
                let shape = self.value(*logits).shape();
                let (n, k) = (shape[0], shape[1]);
                let scale = gs / n as f64;
                let mut d = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                send(*logits, Tensor::from_vec(shape, d)?)?;
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a row-major `[rows, k]` buffer, max-shifted.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(x+h) − f(x−h)) / 2h` of a scalar function of one tensor.
pub fn finite_diff_tensor(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(numeric_err!(
                "non-finite objective while differencing element {i}"
            ));
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_vec(x.shape(), out)
}

/// Central differences of `f` with respect to one stored parameter.
///
/// The parameter is restored exactly afterwards.
pub fn finite_diff(
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    store: &mut ParamStore,
    param: ParamId,
    h: f64,
) -> Result<Tensor> {
    let len = store.value(param).len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let orig = store.value(param).data()[i];
        store.get_mut(param).value.data_mut()[i] = orig + h;
        let up = f(store);
        store.get_mut(param).value.data_mut()[i] = orig - h;
        let down = f(store);
        store.get_mut(param).value.data_mut()[i] = orig;
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(numeric_err!(
                "non-finite objective while differencing element {i}"
            ));
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_vec(store.value(param).shape(), out)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` used by gradient checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
