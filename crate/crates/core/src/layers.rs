//! Layer specs, model construction, forward execution and model surgery.
//!
//! A [`Model`] is an ordered list of instantiated layers whose parameters
//! live in one [`ParamStore`]. Residual blocks nest a list of layers and add
//! their input back in (through a 1×1 projection when channel counts differ).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::{
    local_derivative, make_pvlu_params, ActivationKind, PvluInit, DEFAULT_ELU_A,
    DEFAULT_LEAKY_SLOPE, DEFAULT_SINE_RELU_EPS, PRELU_INIT_SLOPE,
};
use crate::autodiff::{
    softmax_rows, ActOp, Graph, NodeId, ParamId, ParamRole, ParamStore, Parameter,
};
use crate::error::{contract_err, numeric_err, shape_err, Error, Result};
use crate::tensor::{conv_extent, Fill, Padding, Tensor};

/// Batch-norm running statistics momentum: `running ← m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Activation choice for a layer spec (parameters not yet created).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationSpec {
    Relu,
    LeakyRelu { slope: f64 },
    Elu { a: f64 },
    Prelu,
    SineRelu { eps: f64 },
    Vlu { alpha: f64, beta: f64 },
    Pvlu(PvluInit),
}

impl ActivationSpec {
    pub fn leaky() -> Self {
        ActivationSpec::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn elu() -> Self {
        ActivationSpec::Elu { a: DEFAULT_ELU_A }
    }

    pub fn sine_relu() -> Self {
        ActivationSpec::SineRelu {
            eps: DEFAULT_SINE_RELU_EPS,
        }
    }

    /// Parses the names used in configuration files.
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "relu" => ActivationSpec::Relu,
            "leaky" | "leaky_relu" | "leakyrelu" => Self::leaky(),
            "elu" => Self::elu(),
            "prelu" => ActivationSpec::Prelu,
            "sinerelu" | "sine_relu" => Self::sine_relu(),
            "vlu" => ActivationSpec::Vlu {
                alpha: 0.5,
                beta: 1.0,
            },
            "pvlu" => ActivationSpec::Pvlu(PvluInit::Scratch),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationSpec::Relu => "relu",
            ActivationSpec::LeakyRelu { .. } => "leaky",
            ActivationSpec::Elu { .. } => "elu",
            ActivationSpec::Prelu => "prelu",
            ActivationSpec::SineRelu { .. } => "sinerelu",
            ActivationSpec::Vlu { .. } => "vlu",
            ActivationSpec::Pvlu(_) => "pvlu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    BatchNorm,
    Activation(ActivationSpec),
    Residual {
        inner: Vec<LayerSpec>,
    },
    Flatten,
    SoftmaxClassifier {
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: true,
        }
    }

    pub fn conv(filters: usize, kernel: usize, padding: Padding) -> Self {
        Self::new(LayerKind::Conv {
            filters,
            kernel,
            stride: 1,
            padding,
        })
    }

    pub fn dense(units: usize) -> Self {
        Self::new(LayerKind::Dense { units })
    }

    pub fn maxpool(window: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool { window, stride })
    }

    pub fn dropout(rate: f64) -> Self {
        Self::new(LayerKind::Dropout { rate })
    }

    pub fn batchnorm() -> Self {
        Self::new(LayerKind::BatchNorm)
    }

    pub fn activation(spec: ActivationSpec) -> Self {
        Self::new(LayerKind::Activation(spec))
    }

    pub fn residual(inner: Vec<LayerSpec>) -> Self {
        Self::new(LayerKind::Residual { inner })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn classifier(classes: usize) -> Self {
        Self::new(LayerKind::SoftmaxClassifier { classes })
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }
}

/// An activation layer after its parameters have been created.
#[derive(Debug, Clone, PartialEq)]
pub enum ActLayer {
    Fixed(ActivationKind),
    Prelu { slope: ParamId },
    Pvlu { alpha: ParamId, beta: ParamId },
}

impl ActLayer {
    pub fn name(&self) -> &'static str {
        match self {
            ActLayer::Fixed(kind) => kind.name(),
            ActLayer::Prelu { .. } => "prelu",
            ActLayer::Pvlu { .. } => "pvlu",
        }
    }

    /// Current concrete activation, reading parameter values from `params`.
    pub fn kind(&self, params: &ParamStore) -> ActivationKind {
        match self {
            ActLayer::Fixed(k) => k.clone(),
            ActLayer::Prelu { slope } => ActivationKind::Prelu {
                slope: params.value(*slope).data().to_vec(),
            },
            ActLayer::Pvlu { alpha, beta } => ActivationKind::Pvlu {
                alpha: params.value(*alpha).data().to_vec(),
                beta: params.value(*beta).data().to_vec(),
            },
        }
    }
}

/// An instantiated layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: Padding,
    },
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Activation(ActLayer),
    Residual {
        inner: Vec<Layer>,
        projection: Option<(ParamId, ParamId)>,
    },
    Flatten,
    Classifier {
        weight: ParamId,
        bias: ParamId,
    },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Dense { .. } => "dense",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Dropout { .. } => "dropout",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Activation(a) => a.name(),
            Layer::Residual { .. } => "residual",
            Layer::Flatten => "flatten",
            Layer::Classifier { .. } => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter families addressed by freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Both PVLU α and β.
    Pvlu,
    PvluAlpha,
    PvluBeta,
    BatchNorm,
    Prelu,
    Conv,
    Dense,
    /// The final softmax-classifier layer.
    Classifier,
}

impl ParamGroup {
    pub fn matches(self, role: ParamRole) -> bool {
        use ParamRole as R;
        match self {
            ParamGroup::Pvlu => matches!(role, R::PvluAlpha | R::PvluBeta),
            ParamGroup::PvluAlpha => role == R::PvluAlpha,
            ParamGroup::PvluBeta => role == R::PvluBeta,
            ParamGroup::BatchNorm => matches!(role, R::BatchNormScale | R::BatchNormShift),
            ParamGroup::Prelu => role == R::PreluSlope,
            ParamGroup::Conv => matches!(role, R::ConvWeight | R::ConvBias),
            ParamGroup::Dense => matches!(role, R::DenseWeight | R::DenseBias),
            ParamGroup::Classifier => matches!(role, R::ClassifierWeight | R::ClassifierBias),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "pvlu" | "pvlu-params" => ParamGroup::Pvlu,
            "pvlu-alpha" => ParamGroup::PvluAlpha,
            "pvlu-beta" => ParamGroup::PvluBeta,
            "batchnorm" => ParamGroup::BatchNorm,
            "prelu" => ParamGroup::Prelu,
            "conv" => ParamGroup::Conv,
            "dense" => ParamGroup::Dense,
            "classifier" | "head" => ParamGroup::Classifier,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FreezePolicy {
    All,
    /// Only parameters in these groups stay trainable.
    Only(Vec<ParamGroup>),
}

/// Where an activation layer sits: top-level index, then indices inside residual blocks.
pub type LayerPath = Vec<usize>;

pub fn path_label(path: &[usize]) -> String {
    let mut s = String::new();
    for (i, p) in path.iter().enumerate() {
        if i > 0 {
            s.push('.');
        }
        s.push_str(&format!("{p}"));
    }
    s
}

/// An activation evaluated during a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub path: LayerPath,
    pub pre: NodeId,
    pub post: NodeId,
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub activations: Vec<ActivationTrace>,
}

impl Forward {
    pub fn logits(&self) -> &Tensor {
        self.graph.value(self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub params: ParamStore,
    /// Per-sample input shape (no batch axis).
    pub input_shape: Vec<usize>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Counts produced by [`Model::substitute_pvlu`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substitution {
    pub replaced: usize,
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn he(
        &mut self,
        name: String,
        role: ParamRole,
        shape: &[usize],
        fan_in: usize,
        trainable: bool,
    ) -> Result<ParamId> {
        let std = libm::sqrt(2.0 / fan_in as f64);
        let seed = self.rng.next_u64();
        let value = Tensor::create(
            shape,
            Fill::SeededNormal {
                mean: 0.0,
                std,
                seed,
            },
        )?;
        Ok(self.constant(name, role, value, trainable))
    }

    fn constant(
        &mut self,
        name: String,
        role: ParamRole,
        value: Tensor,
        trainable: bool,
    ) -> ParamId {
        let id = self.params.add(name, role, value);
        self.params.get_mut(id).trainable = trainable;
        id
    }

    fn fill(
        &mut self,
        name: String,
        role: ParamRole,
        shape: &[usize],
        c: f64,
        trainable: bool,
    ) -> Result<ParamId> {
        Ok(self.constant(
            name,
            role,
            Tensor::create(shape, Fill::Constant(c))?,
            trainable,
        ))
    }

    fn build(
        &mut self,
        specs: &[LayerSpec],
        input: &[usize],
        prefix: &[usize],
    ) -> Result<(Vec<Layer>, Vec<usize>)> {
        let mut shape = input.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut path = prefix.to_vec();
            path.push(i);
            let index = path[0];
            let err = |message: String| Error::Build { index, message };
            let tag = path_label(&path);
            let t = spec.trainable;
            let (layer, out) = match &spec.kind {
                LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(err(format!("conv expects [C,H,W] input, got {shape:?}")));
                    };
                    let (oh, _) = conv_extent(h, *kernel, *stride, *padding)
                        .map_err(|e| err(format!("{e}")))?;
                    let (ow, _) = conv_extent(w, *kernel, *stride, *padding)
                        .map_err(|e| err(format!("{e}")))?;
                    if *filters == 0 {
                        return Err(err("conv needs at least one filter".into()));
                    }
                    let weight = self.he(
                        format!("{tag}.conv.weight"),
                        ParamRole::ConvWeight,
                        &[*filters, c, *kernel, *kernel],
                        c * kernel * kernel,
                        t,
                    )?;
                    let bias = self.fill(
                        format!("{tag}.conv.bias"),
                        ParamRole::ConvBias,
                        &[*filters],
                        0.0,
                        t,
                    )?;
                    (
                        Layer::Conv {
                            weight,
                            bias,
                            stride: *stride,
                            padding: *padding,
                        },
                        vec![*filters, oh, ow],
                    )
                }
                LayerKind::Dense { units } | LayerKind::SoftmaxClassifier { classes: units } => {
                    let &[d] = shape.as_slice() else {
                        return Err(err(format!("dense expects a flat input, got {shape:?}")));
                    };
                    if *units == 0 {
                        return Err(err("dense needs at least one unit".into()));
                    }
                    let head = matches!(spec.kind, LayerKind::SoftmaxClassifier { .. });
                    let (wr, br, label) = if head {
                        (
                            ParamRole::ClassifierWeight,
                            ParamRole::ClassifierBias,
                            "classifier",
                        )
                    } else {
                        (ParamRole::DenseWeight, ParamRole::DenseBias, "dense")
                    };
                    let weight =
                        self.he(format!("{tag}.{label}.weight"), wr, &[d, *units], d, t)?;
                    let bias = self.fill(format!("{tag}.{label}.bias"), br, &[*units], 0.0, t)?;
                    let layer = if head {
                        Layer::Classifier { weight, bias }
                    } else {
                        Layer::Dense { weight, bias }
                    };
                    (layer, vec![*units])
                }
                LayerKind::MaxPool { window, stride } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(err(format!("maxpool expects [C,H,W] input, got {shape:?}")));
                    };
                    if *window == 0 || *stride == 0 || *window > h || *window > w {
                        return Err(err(format!(
                            "pool window {window}/stride {stride} invalid for {h}x{w}"
                        )));
                    }
                    let out = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
                    (
                        Layer::MaxPool {
                            window: *window,
                            stride: *stride,
                        },
                        out,
                    )
                }
                LayerKind::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(err(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    (Layer::Dropout { rate: *rate }, shape.clone())
                }
                LayerKind::BatchNorm => {
                    let c = channels_of(&shape)
                        .ok_or_else(|| err(format!("batchnorm on {shape:?}")))?;
                    let gamma = self.fill(
                        format!("{tag}.bn.gamma"),
                        ParamRole::BatchNormScale,
                        &[c],
                        1.0,
                        t,
                    )?;
                    let beta = self.fill(
                        format!("{tag}.bn.beta"),
                        ParamRole::BatchNormShift,
                        &[c],
                        0.0,
                        t,
                    )?;
                    let layer = Layer::BatchNorm {
                        gamma,
                        beta,
                        running_mean: vec![0.0; c],
                        running_var: vec![1.0; c],
                    };
                    (layer, shape.clone())
                }
                LayerKind::Activation(a) => {
                    let layer = self
                        .activation(*a, &shape, &tag, t)
                        .map_err(|e| err(format!("{e}")))?;
                    (Layer::Activation(layer), shape.clone())
                }
                LayerKind::Residual { inner } => {
                    let (inner_layers, out) = self.build(inner, &shape, &path)?;
                    let projection = if out == shape {
                        None
                    } else {
                        match (shape.as_slice(), out.as_slice()) {
                            (&[c, h, w], &[f, oh, ow]) if h == oh && w == ow => {
                                let weight = self.he(
                                    format!("{tag}.proj.weight"),
                                    ParamRole::ConvWeight,
                                    &[f, c, 1, 1],
                                    c,
                                    t,
                                )?;
                                let bias = self.fill(format!("{tag}.proj.bias"), ParamRole::ConvBias, &[f], 0.0, t)?;
                                Some((weight, bias))
                            }
                            _ => {
                                return Err(err(format!(
                                    "residual block maps {shape:?} to {out:?}; only channel counts may change"
                                )))
                            }
                        }
                    };
                    (
                        Layer::Residual {
                            inner: inner_layers,
                            projection,
                        },
                        out,
                    )
                }
                LayerKind::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
            };
            layers.push(layer);
            shape = out;
        }
        Ok((layers, shape))
    }

    fn activation(
        &mut self,
        spec: ActivationSpec,
        shape: &[usize],
        tag: &str,
        t: bool,
    ) -> Result<ActLayer> {
        Ok(match spec {
            ActivationSpec::Relu => ActLayer::Fixed(ActivationKind::Relu),
            ActivationSpec::LeakyRelu { slope } => {
                ActLayer::Fixed(ActivationKind::LeakyRelu { slope })
            }
            ActivationSpec::Elu { a } => ActLayer::Fixed(ActivationKind::Elu { a }),
            ActivationSpec::SineRelu { eps } => ActLayer::Fixed(ActivationKind::SineRelu { eps }),
            ActivationSpec::Vlu { alpha, beta } => {
                ActLayer::Fixed(ActivationKind::Vlu { alpha, beta })
            }
            ActivationSpec::Prelu => {
                let c = channels_of(shape).ok_or_else(|| shape_err!("prelu on {shape:?}"))?;
                let slope = self.fill(
                    format!("{tag}.prelu.slope"),
                    ParamRole::PreluSlope,
                    &[c],
                    PRELU_INIT_SLOPE,
                    t,
                )?;
                ActLayer::Prelu { slope }
            }
            ActivationSpec::Pvlu(init) => {
                let c = channels_of(shape).ok_or_else(|| shape_err!("pvlu on {shape:?}"))?;
                let ActivationKind::Pvlu { alpha, beta } = make_pvlu_params(c, init)? else {
                    unreachable!("make_pvlu_params returns a PVLU")
                };
                let alpha = self.constant(
                    format!("{tag}.pvlu.alpha"),
                    ParamRole::PvluAlpha,
                    Tensor::from_vec(&[c], alpha)?,
                    t,
                );
                let beta = self.constant(
                    format!("{tag}.pvlu.beta"),
                    ParamRole::PvluBeta,
                    Tensor::from_vec(&[c], beta)?,
                    t,
                );
                ActLayer::Pvlu { alpha, beta }
            }
        })
    }
}

/// Channel axis extent: first axis of `[C,H,W]` or the only axis of `[D]`.
fn channels_of(shape: &[usize]) -> Option<usize> {
    match shape {
        [c] | [c, _, _] => Some(*c),
        _ => None,
    }
}

struct RunState<'a> {
    params: &'a ParamStore,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    stats: Vec<(LayerPath, crate::autodiff::BatchStats)>,
    traces: Vec<ActivationTrace>,
}

fn run_layers(
    layers: &[Layer],
    graph: &mut Graph,
    mut x: NodeId,
    prefix: &[usize],
    st: &mut RunState<'_>,
) -> Result<NodeId> {
    for (i, layer) in layers.iter().enumerate() {
        let mut path = prefix.to_vec();
        path.push(i);
        x = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = graph.param(st.params, *weight);
                let b = graph.param(st.params, *bias);
                let y = graph.conv2d(x, w, *stride, *padding)?;
                graph.add(y, b)?
            }
            Layer::Dense { weight, bias } | Layer::Classifier { weight, bias } => {
                let w = graph.param(st.params, *weight);
                let b = graph.param(st.params, *bias);
                let y = graph.matmul(x, w)?;
                graph.add(y, b)?
            }
            Layer::MaxPool { window, stride } => graph.maxpool2d(x, *window, *stride)?,
            Layer::Dropout { rate } => match (st.mode, st.rng.as_deref_mut()) {
                (Mode::Train, Some(rng)) if *rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask = (0..graph.value(x).len())
                        .map(|_| {
                            if rng.random::<f64>() < *rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    graph.dropout(x, mask)?
                }
                _ => x,
            },
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let g = graph.param(st.params, *gamma);
                let b = graph.param(st.params, *beta);
                match st.mode {
                    Mode::Train => {
                        let (y, stats) = graph.batchnorm(x, g, b, None)?;
                        if let Some(stats) = stats {
                            st.stats.push((path.clone(), stats));
                        }
                        y
                    }
                    Mode::Eval => {
                        graph
                            .batchnorm(x, g, b, Some((running_mean, running_var)))?
                            .0
                    }
                }
            }
            Layer::Activation(act) => {
                let op = match act {
                    ActLayer::Fixed(kind) => ActOp::Fixed(kind.clone()),
                    ActLayer::Prelu { slope } => ActOp::Prelu {
                        slope: graph.param(st.params, *slope),
                    },
                    ActLayer::Pvlu { alpha, beta } => ActOp::Pvlu {
                        alpha: graph.param(st.params, *alpha),
                        beta: graph.param(st.params, *beta),
                    },
                };
                let y = graph.activation(x, op)?;
                st.traces.push(ActivationTrace {
                    path: path.clone(),
                    pre: x,
                    post: y,
                });
                y
            }
            Layer::Residual { inner, projection } => {
                let body = run_layers(inner, graph, x, &path, st)?;
                let skip = match projection {
                    Some((w, b)) => {
                        let w = graph.param(st.params, *w);
                        let b = graph.param(st.params, *b);
                        let y = graph.conv2d(x, w, 1, Padding::Same)?;
                        graph.add(y, b)?
                    }
                    None => x,
                };
                graph.add(body, skip)?
            }
            Layer::Flatten => {
                let shape = graph.value(x).shape();
                let n = shape[0];
                let rest = shape[1..].iter().product();
                graph.reshape(x, &[n, rest])?
            }
        };
        if !graph.value(x).all_finite() {
            return Err(numeric_err!(
                "non-finite output from layer {} ({})",
                path_label(&path),
                layer.name()
            ));
        }
    }
    Ok(x)
}

fn layer_at_mut<'a>(layers: &'a mut [Layer], path: &[usize]) -> Option<&'a mut Layer> {
    let (first, rest) = path.split_first()?;
    let layer = layers.get_mut(*first)?;
    if rest.is_empty() {
        return Some(layer);
    }
    match layer {
        Layer::Residual { inner, .. } => layer_at_mut(inner, rest),
        _ => None,
    }
}

impl Model {
    /// Builds a model for per-sample `input_shape` with He-normal weights drawn from `seed`.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(shape_err!("invalid input shape {input_shape:?}"));
        }
        let mut params = ParamStore::new();
        let mut builder = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (layers, _) = builder.build(specs, input_shape, &[])?;
        Ok(Self {
            layers,
            params,
            input_shape: input_shape.to_vec(),
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d40f_0a11_ce55),
        })
    }

    /// Assembles a model from already-instantiated parts (checkpoint loading).
    pub fn from_parts(
        layers: Vec<Layer>,
        params: ParamStore,
        input_shape: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let model = Self {
            layers,
            params,
            input_shape,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d40f_0a11_ce55),
        };
        model.output_shape()?;
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Reseeds the dropout stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d40f_0a11_ce55);
    }

    /// Per-sample output shape, found by a dry run on a one-sample batch.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let out = self.infer(&Tensor::zeros(&shape)?)?;
        Ok(out.shape()[1..].to_vec())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(shape_err!(
                "batch shape {:?} does not match model input [N, {:?}]",
                batch.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        input_grad: bool,
    ) -> Result<(Forward, Vec<(LayerPath, crate::autodiff::BatchStats)>)> {
        self.check_batch(batch)?;
        let mut graph = Graph::new();
        let input = if input_grad {
            graph.input_with_grad(batch.clone())
        } else {
            graph.input(batch.clone())
        };
        let mut st = RunState {
            params: &self.params,
            mode,
            rng,
            stats: Vec::new(),
            traces: Vec::new(),
        };
        let logits = run_layers(&self.layers, &mut graph, input, &[], &mut st)?;
        let RunState { stats, traces, .. } = st;
        Ok((
            Forward {
                graph,
                input,
                logits,
                activations: traces,
            },
            stats,
        ))
    }

    /// Records a forward pass in the current mode.
    ///
    /// In train mode this draws fresh dropout masks and updates batch-norm
    /// running statistics.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Forward> {
        self.forward_with(batch, false)
    }

    /// Like [`Model::forward`], also tracking the gradient with respect to the input batch.
    pub fn forward_with(&mut self, batch: &Tensor, input_grad: bool) -> Result<Forward> {
        let mode = self.mode;
        let mut rng = self.rng.clone();
        let (fwd, stats) = self.run(batch, mode, Some(&mut rng), input_grad)?;
        self.rng = rng;
        for (path, s) in stats {
            if let Some(Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            }) = layer_at_mut(&mut self.layers, &path)
            {
                for c in 0..running_mean.len() {
                    running_mean[c] =
                        BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * s.mean[c];
                    running_var[c] = BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * s.var[c];
                }
            }
        }
        Ok(fwd)
    }

    /// Eval-mode logits without touching model state.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let (fwd, _) = self.run(batch, Mode::Eval, None, false)?;
        Ok(fwd.graph.value(fwd.logits).clone())
    }

    /// Eval-mode forward pass with the tape kept (diagnostics).
    pub fn trace(&self, batch: &Tensor, input_grad: bool) -> Result<Forward> {
        Ok(self.run(batch, Mode::Eval, None, input_grad)?.0)
    }

    /// Eval-mode class probabilities (softmax of the logits).
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.infer(batch)?;
        let k = *logits
            .shape()
            .last()
            .ok_or_else(|| shape_err!("scalar logits"))?;
        Tensor::from_vec(logits.shape(), softmax_rows(logits.data(), k))
    }

    /// Input shape seen by every activation layer, keyed by path.
    pub fn activation_shapes(&self) -> Result<Vec<(LayerPath, Vec<usize>)>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let fwd = self.trace(&Tensor::zeros(&shape)?, false)?;
        Ok(fwd
            .activations
            .iter()
            .map(|t| (t.path.clone(), fwd.graph.value(t.pre).shape()[1..].to_vec()))
            .collect())
    }

    /// Replaces every ReLU activation with a PVLU carrying fresh per-channel parameters.
    ///
    /// Existing parameters keep their ids and values; the new α/β are appended
    /// to the registry. With [`PvluInit::Finetune`] the returned model computes
    /// exactly the same function.
    pub fn substitute_pvlu(&self, init: PvluInit) -> Result<(Model, Substitution)> {
        let shapes = self.activation_shapes()?;
        let mut model = self.clone();
        let mut replaced = 0;
        for (path, shape) in shapes {
            let Some(layer) = layer_at_mut(&mut model.layers, &path) else {
                continue;
            };
            if *layer != Layer::Activation(ActLayer::Fixed(ActivationKind::Relu)) {
                continue;
            }
            let channels =
                channels_of(&shape).ok_or_else(|| shape_err!("activation input {shape:?}"))?;
            let ActivationKind::Pvlu { alpha, beta } = make_pvlu_params(channels, init)? else {
                unreachable!("make_pvlu_params returns a PVLU")
            };
            let tag = path_label(&path);
            let alpha = model.params.add(
                format!("{tag}.pvlu.alpha"),
                ParamRole::PvluAlpha,
                Tensor::from_vec(&[channels], alpha)?,
            );
            let beta = model.params.add(
                format!("{tag}.pvlu.beta"),
                ParamRole::PvluBeta,
                Tensor::from_vec(&[channels], beta)?,
            );
            *layer = Layer::Activation(ActLayer::Pvlu { alpha, beta });
            replaced += 1;
        }
        Ok((model, Substitution { replaced }))
    }

    /// Applies a freeze policy; returns how many parameters stay trainable.
    pub fn set_trainable(&mut self, policy: &FreezePolicy) -> Result<usize> {
        match policy {
            FreezePolicy::All => self.set_trainable_where(|_| true),
            FreezePolicy::Only(groups) => {
                self.set_trainable_where(|p| groups.iter().any(|g| g.matches(p.role)))
            }
        }
    }

    /// Marks exactly the parameters selected by `select` as trainable.
    pub fn set_trainable_where(&mut self, select: impl Fn(&Parameter) -> bool) -> Result<usize> {
        let selected = self.params.iter().filter(|p| select(p)).count();
        if selected == 0 {
            return Err(contract_err!("trainability selector matched no parameters"));
        }
        for p in self.params.iter_mut() {
            p.trainable = select(p);
        }
        Ok(selected)
    }

    /// Every activation layer, with its path.
    pub fn activation_layers(&self) -> Vec<(LayerPath, &ActLayer)> {
        fn walk<'a>(
            layers: &'a [Layer],
            prefix: &[usize],
            out: &mut Vec<(LayerPath, &'a ActLayer)>,
        ) {
            for (i, layer) in layers.iter().enumerate() {
                let mut path = prefix.to_vec();
                path.push(i);
                match layer {
                    Layer::Activation(a) => out.push((path, a)),
                    Layer::Residual { inner, .. } => walk(inner, &path, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &[], &mut out);
        out
    }

    /// Rounds every parameter and running statistic to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
        fn walk(layers: &mut [Layer]) {
            for layer in layers {
                match layer {
                    Layer::BatchNorm {
                        running_mean,
                        running_var,
                        ..
                    } => {
                        running_mean
                            .iter_mut()
                            .chain(running_var.iter_mut())
                            .for_each(|v| *v = *v as f32 as f64);
                    }
                    Layer::Residual { inner, .. } => walk(inner),
                    _ => {}
                }
            }
        }
        walk(&mut self.layers);
    }
}

/// Per-layer share of activation units whose local derivative is exactly zero
/// for every sample of a probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadUnits {
    pub path: LayerPath,
    pub kind: &'static str,
    pub units: usize,
    pub dead: usize,
}

impl DeadUnits {
    pub fn fraction(&self) -> f64 {
        self.dead as f64 / self.units as f64
    }
}

/// Dead-unit census over an eval-mode pass of `probe`.
pub fn dead_units(model: &Model, probe: &Tensor) -> Result<Vec<DeadUnits>> {
    let fwd = model.trace(probe, false)?;
    let acts = model.activation_layers();
    let mut out = Vec::with_capacity(acts.len());
    for (trace, (path, act)) in fwd.activations.iter().zip(acts) {
        debug_assert_eq!(trace.path, path);
        let z = fwd.graph.value(trace.pre);
        let d = local_derivative(&act.kind(&model.params), z)?;
        let n = z.shape()[0];
        let units = z.len() / n;
        let dead = (0..units)
            .filter(|&u| (0..n).all(|s| d.data()[s * units + u] == 0.0))
            .count();
        out.push(DeadUnits {
            path,
            kind: act.name(),
            units,
            dead,
        });
    }
    Ok(out)
}

/// Ready-made architectures.
pub mod presets {
    use super::*;

    /// Two convolutions and a classifier; small enough for exhaustive gradient checks.
    pub fn tiny_cnn(act: ActivationSpec, classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(3, 3, Padding::Same),
            LayerSpec::activation(act),
            LayerSpec::conv(4, 3, Padding::Valid),
            LayerSpec::activation(act),
            LayerSpec::flatten(),
            LayerSpec::classifier(classes),
        ]
    }

    /// Two conv/pool stages and a dense layer for 28×28 digits.
    pub fn mnist_cnn(act: ActivationSpec) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(8, 3, Padding::Same),
            LayerSpec::activation(act),
            LayerSpec::maxpool(2, 2),
            LayerSpec::conv(16, 3, Padding::Same),
            LayerSpec::activation(act),
            LayerSpec::maxpool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(64),
            LayerSpec::activation(act),
            LayerSpec::classifier(10),
        ]
    }

    /// Six convolutions in three same/valid pairs, each pair followed by
    /// pooling and dropout (0.1), then a dense layer, dropout (0.25) and the
    /// classifier.
    pub fn six_conv(
        act: ActivationSpec,
        widths: [usize; 3],
        dense: usize,
        classes: usize,
        batchnorm: bool,
    ) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &w in &widths {
            for padding in [Padding::Same, Padding::Valid] {
                specs.push(LayerSpec::conv(w, 3, padding));
                if batchnorm {
                    specs.push(LayerSpec::batchnorm());
                }
                specs.push(LayerSpec::activation(act));
            }
            specs.push(LayerSpec::maxpool(2, 2));
            specs.push(LayerSpec::dropout(0.1));
        }
        specs.push(LayerSpec::flatten());
        specs.push(LayerSpec::dense(dense));
        specs.push(LayerSpec::activation(act));
        specs.push(LayerSpec::dropout(0.25));
        specs.push(LayerSpec::classifier(classes));
        specs
    }

    /// Conv stem, two residual blocks with batch norm, pooling and a classifier.
    pub fn residual_cnn(act: ActivationSpec, width: usize, classes: usize) -> Vec<LayerSpec> {
        let block = |w: usize| {
            LayerSpec::residual(vec![
                LayerSpec::conv(w, 3, Padding::Same),
                LayerSpec::batchnorm(),
                LayerSpec::activation(act),
                LayerSpec::conv(w, 3, Padding::Same),
                LayerSpec::batchnorm(),
            ])
        };
        vec![
            LayerSpec::conv(width, 3, Padding::Same),
            LayerSpec::batchnorm(),
            LayerSpec::activation(act),
            block(width),
            LayerSpec::activation(act),
            LayerSpec::maxpool(2, 2),
            block(2 * width),
            LayerSpec::activation(act),
            LayerSpec::maxpool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::classifier(classes),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, relative_error};

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        Tensor::create(
            shape,
            Fill::SeededNormal {
                mean: 0.0,
                std: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn dense_weight_shape() {
        let m = Model::build(
            &[
                LayerSpec::dense(10),
                LayerSpec::activation(ActivationSpec::Relu),
            ],
            &[5],
            1,
        )
        .unwrap();
        let Layer::Dense { weight, bias } = m.layers[0] else {
            panic!()
        };
        assert_eq!(m.params.value(weight).shape(), &[5, 10]);
        assert_eq!(m.params.value(bias).shape(), &[10]);
        assert_eq!(m.output_shape().unwrap(), vec![10]);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let specs = presets::mnist_cnn(ActivationSpec::Relu);
        let a = Model::build(&specs, &[1, 28, 28], 9).unwrap();
        let b = Model::build(&specs, &[1, 28, 28], 9).unwrap();
        let c = Model::build(&specs, &[1, 28, 28], 10).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        assert_ne!(
            a.params.iter().next().unwrap().value.data(),
            c.params.iter().next().unwrap().value.data()
        );
    }

    #[test]
    fn build_reports_offending_layer() {
        let specs = [LayerSpec::conv(4, 3, Padding::Same), LayerSpec::dense(3)];
        match Model::build(&specs, &[1, 5, 5], 0) {
            Err(Error::Build { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let specs = [LayerSpec::flatten(), LayerSpec::dropout(1.0)];
        assert!(matches!(
            Model::build(&specs, &[4], 0),
            Err(Error::Build { index: 1, .. })
        ));
        let specs = [LayerSpec::conv(2, 7, Padding::Valid)];
        assert!(matches!(
            Model::build(&specs, &[1, 5, 5], 0),
            Err(Error::Build { index: 0, .. })
        ));
    }

    #[test]
    fn output_shapes_of_presets() {
        let m = Model::build(
            &presets::six_conv(ActivationSpec::Relu, [8, 16, 32], 64, 10, true),
            &[3, 32, 32],
            0,
        )
        .unwrap();
        assert_eq!(m.output_shape().unwrap(), vec![10]);
        let m = Model::build(
            &presets::residual_cnn(ActivationSpec::Relu, 4, 10),
            &[3, 16, 16],
            0,
        )
        .unwrap();
        assert_eq!(m.output_shape().unwrap(), vec![10]);
        let fwd = m.trace(&random_batch(&[3, 3, 16, 16], 2), false).unwrap();
        assert_eq!(fwd.logits().shape(), &[3, 10]);
    }

    #[test]
    fn hand_set_dense() {
        let mut m = Model::build(&[LayerSpec::dense(1)], &[2], 0).unwrap();
        let Layer::Dense { weight, bias } = m.layers[0] else {
            panic!()
        };
        m.params.get_mut(weight).value = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        m.params.get_mut(bias).value = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let out = m
            .infer(&Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn eval_forward_is_repeatable_and_probabilities_normalised() {
        let m = Model::build(&presets::mnist_cnn(ActivationSpec::Relu), &[1, 28, 28], 3).unwrap();
        let x = random_batch(&[4, 1, 28, 28], 5);
        assert_eq!(m.infer(&x).unwrap().data(), m.infer(&x).unwrap().data());
        let p = m.predict_proba(&x).unwrap();
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_shape_mismatch() {
        let m = Model::build(&[LayerSpec::dense(2)], &[3], 0).unwrap();
        assert!(matches!(
            m.infer(&Tensor::zeros(&[2, 4]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nan_names_first_offending_layer() {
        let specs = [
            LayerSpec::dense(4),
            LayerSpec::activation(ActivationSpec::Relu),
            LayerSpec::dense(2),
        ];
        let mut m = Model::build(&specs, &[3], 0).unwrap();
        let Layer::Dense { weight, .. } = m.layers[2] else {
            panic!()
        };
        m.params.get_mut(weight).value.data_mut()[0] = f64::NAN;
        match m.infer(&Tensor::create(&[1, 3], Fill::Constant(1.0)).unwrap()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residual_with_zero_inner_is_identity() {
        let specs = [LayerSpec::residual(vec![LayerSpec::conv(
            2,
            3,
            Padding::Same,
        )])];
        let mut m = Model::build(&specs, &[2, 4, 4], 0).unwrap();
        for p in m.params.iter_mut() {
            p.value = p.value.zeros_like();
        }
        let x = random_batch(&[2, 2, 4, 4], 1);
        assert_eq!(m.infer(&x).unwrap().data(), x.data());
    }

    #[test]
    fn residual_projection_when_channels_change() {
        let specs = [LayerSpec::residual(vec![LayerSpec::conv(
            5,
            3,
            Padding::Same,
        )])];
        let m = Model::build(&specs, &[2, 4, 4], 0).unwrap();
        let Layer::Residual {
            projection: Some((w, _)),
            ..
        } = &m.layers[0]
        else {
            panic!()
        };
        assert_eq!(m.params.value(*w).shape(), &[5, 2, 1, 1]);
        let bad = [LayerSpec::residual(vec![LayerSpec::conv(
            2,
            3,
            Padding::Valid,
        )])];
        assert!(matches!(
            Model::build(&bad, &[2, 4, 4], 0),
            Err(Error::Build { index: 0, .. })
        ));
    }

    #[test]
    fn dropout_train_vs_eval() {
        let mut m = Model::build(&[LayerSpec::dropout(0.5)], &[1000], 4).unwrap();
        let x = Tensor::create(&[1, 1000], Fill::Constant(1.0)).unwrap();
        assert_eq!(m.infer(&x).unwrap().data(), x.data());
        m.set_mode(Mode::Train);
        let a = m.forward(&x).unwrap().logits().clone();
        let b = m.forward(&x).unwrap().logits().clone();
        assert_ne!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
    }

    #[test]
    fn batchnorm_running_stats_update_in_train_mode() {
        let mut m = Model::build(&[LayerSpec::batchnorm()], &[2], 0).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap();
        m.infer(&x).unwrap();
        m.set_mode(Mode::Train);
        m.forward(&x).unwrap();
        let Layer::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &m.layers[0]
        else {
            panic!()
        };
        assert!((running_mean[0] - 0.2).abs() < 1e-15);
        assert!((running_mean[1] - 1.0).abs() < 1e-15);
        assert!((running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
        assert!((running_var[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn substitution_identity_and_counts() {
        let specs = [
            LayerSpec::conv(8, 3, Padding::Same),
            LayerSpec::activation(ActivationSpec::Relu),
            LayerSpec::conv(16, 3, Padding::Same),
            LayerSpec::activation(ActivationSpec::Relu),
            LayerSpec::conv(32, 3, Padding::Valid),
            LayerSpec::activation(ActivationSpec::Relu),
            LayerSpec::flatten(),
            LayerSpec::classifier(3),
        ];
        let m = Model::build(&specs, &[1, 5, 5], 11).unwrap();
        let (s, sub) = m.substitute_pvlu(PvluInit::Finetune).unwrap();
        assert_eq!(sub.replaced, 3);
        let lens: Vec<usize> = s
            .activation_layers()
            .iter()
            .map(|(_, a)| match a {
                ActLayer::Pvlu { alpha, .. } => s.params.value(*alpha).len(),
                _ => panic!("not substituted"),
            })
            .collect();
        assert_eq!(lens, vec![8, 16, 32]);
        for p in m.params.iter() {
            assert_eq!(s.params.get(p.id).value.data(), p.value.data());
        }
        for seed in 0..20 {
            let x = random_batch(&[2, 1, 5, 5], seed);
            assert_eq!(m.infer(&x).unwrap().data(), s.infer(&x).unwrap().data());
        }
        let (s2, _) = m.substitute_pvlu(PvluInit::Scratch).unwrap();
        let alphas: Vec<f64> = s2
            .params
            .iter()
            .filter(|p| p.role == ParamRole::PvluAlpha)
            .flat_map(|p| p.value.data().to_vec())
            .collect();
        assert!(alphas.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn substitution_reaches_residual_blocks_and_tolerates_no_relu() {
        let m = Model::build(
            &presets::residual_cnn(ActivationSpec::Relu, 2, 3),
            &[1, 8, 8],
            0,
        )
        .unwrap();
        let relus = m.activation_layers().len();
        let (s, sub) = m.substitute_pvlu(PvluInit::Finetune).unwrap();
        assert_eq!(sub.replaced, relus);
        assert!(s.activation_layers().iter().any(|(p, _)| p.len() == 2));
        let x = random_batch(&[2, 1, 8, 8], 3);
        assert_eq!(m.infer(&x).unwrap().data(), s.infer(&x).unwrap().data());

        let m = Model::build(&presets::tiny_cnn(ActivationSpec::elu(), 2), &[1, 6, 6], 0).unwrap();
        let (s, sub) = m.substitute_pvlu(PvluInit::Finetune).unwrap();
        assert_eq!(sub.replaced, 0);
        assert_eq!(s, m);
    }

    #[test]
    fn freeze_policies() {
        let m = Model::build(
            &presets::residual_cnn(ActivationSpec::Relu, 2, 3),
            &[1, 8, 8],
            0,
        )
        .unwrap();
        let (mut s, _) = m.substitute_pvlu(PvluInit::Finetune).unwrap();
        s.set_trainable(&FreezePolicy::Only(vec![
            ParamGroup::Pvlu,
            ParamGroup::BatchNorm,
        ]))
        .unwrap();
        for p in s.params.iter() {
            let expect = matches!(
                p.role,
                ParamRole::PvluAlpha
                    | ParamRole::PvluBeta
                    | ParamRole::BatchNormScale
                    | ParamRole::BatchNormShift
            );
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
        let n = s.set_trainable(&FreezePolicy::All).unwrap();
        assert_eq!(n, s.params.len());
        assert!(s.params.iter().all(|p| p.trainable));
        let mut plain = m.clone();
        assert!(matches!(
            plain.set_trainable(&FreezePolicy::Only(vec![ParamGroup::Pvlu])),
            Err(Error::Contract(_))
        ));
        assert!(plain.params.iter().all(|p| p.trainable));
    }

    #[test]
    fn frozen_spec_flag() {
        let m = Model::build(
            &[LayerSpec::dense(2).frozen(), LayerSpec::classifier(2)],
            &[3],
            0,
        )
        .unwrap();
        let flags: Vec<bool> = m.params.iter().map(|p| p.trainable).collect();
        assert_eq!(flags, vec![false, false, true, true]);
    }

    #[test]
    fn tiny_cnn_gradients_match_finite_differences() {
        let act = ActivationSpec::Pvlu(PvluInit::Scratch);
        let specs = [
            LayerSpec::conv(3, 3, Padding::Same),
            LayerSpec::batchnorm(),
            LayerSpec::activation(act),
            LayerSpec::conv(4, 3, Padding::Valid),
            LayerSpec::activation(ActivationSpec::Prelu),
            LayerSpec::maxpool(2, 2),
            LayerSpec::flatten(),
            LayerSpec::dense(5),
            LayerSpec::activation(ActivationSpec::elu()),
            LayerSpec::dropout(0.3),
            LayerSpec::classifier(3),
        ];
        let mut m = Model::build(&specs, &[2, 6, 6], 21).unwrap();
        assert!(m.params.scalar_count() <= 2000);
        let x = random_batch(&[4, 2, 6, 6], 8);
        let labels = [0usize, 2, 1, 2];
        let loss_of = |model: &Model, store: &ParamStore| -> Result<f64> {
            let mut probe = model.clone();
            probe.params = store.clone();
            let mut fwd = probe.trace(&x, false)?;
            let l = fwd.graph.softmax_cross_entropy(fwd.logits, &labels)?;
            fwd.graph.value(l).item()
        };
        let mut fwd = m.trace(&x, false).unwrap();
        let loss = fwd
            .graph
            .softmax_cross_entropy(fwd.logits, &labels)
            .unwrap();
        let grads = fwd.graph.backward(loss, &mut m.params).unwrap();
        let reference = m.clone();
        let ids: Vec<ParamId> = m.params.iter().map(|p| p.id).collect();
        let mut worst = 0.0f64;
        for id in ids {
            let numeric = finite_diff(|s| loss_of(&reference, s), &mut m.params, id, 1e-5).unwrap();
            let analytic = grads.param(id).unwrap();
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let r = relative_error(*a, *n, 1e-6);
                assert!(r < 1e-4, "{} {a} {n}", reference.params.get(id).name);
                worst = worst.max(r);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn dead_unit_census() {
        let mut m = Model::build(
            &[
                LayerSpec::dense(3),
                LayerSpec::activation(ActivationSpec::Relu),
            ],
            &[2],
            0,
        )
        .unwrap();
        let Layer::Dense { weight, bias } = m.layers[0] else {
            panic!()
        };
        m.params.get_mut(weight).value =
            Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        m.params.get_mut(bias).value = Tensor::from_vec(&[3], vec![0.0, 0.0, -1.0]).unwrap();
        let probe = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 0.5, 0.5]).unwrap();
        let report = dead_units(&m, &probe).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!((report[0].units, report[0].dead), (3, 2));
    }
}
