//! Binary model checkpoints.
//!
//! All integers are little-endian `u32` unless noted.
//!
//! ```text
//! "PVLU"                      magic
//! version                     currently 1
//! rank, dims[rank]            per-sample input shape
//! layer count, layers         layer table (below)
//! param count, records        name length, UTF-8 name, role u8, trainable u8, rank, dims
//! blobs                       every parameter's values as f32, in registry order
//! ```
//!
//! A layer is a tag byte followed by its fields. Parameter references are
//! registry indices. Hyperparameters (dropout rate, fixed activation
//! constants) are stored as f64; batch-norm running statistics as a length
//! and two f32 arrays.
//!
//! Values are narrowed to f32 on save, so a model survives save → load
//! bitwise only if it already holds f32-representable values
//! (see [`Model::round_to_f32`]). Saving a loaded model reproduces the file
//! byte for byte.

use std::path::Path;

use pvlu_core::layers::{ActLayer, Layer};
use pvlu_core::{ActivationKind, Error, Model, Padding, ParamId, ParamRole, ParamStore, Tensor};

use crate::error::{in_file, LabError, LabResult};

pub const MAGIC: &[u8; 4] = b"PVLU";
pub const VERSION: u32 = 1;

const ROLES: [ParamRole; 12] = [
    ParamRole::ConvWeight,
    ParamRole::ConvBias,
    ParamRole::DenseWeight,
    ParamRole::DenseBias,
    ParamRole::ClassifierWeight,
    ParamRole::ClassifierBias,
    ParamRole::BatchNormScale,
    ParamRole::BatchNormShift,
    ParamRole::PreluSlope,
    ParamRole::PvluAlpha,
    ParamRole::PvluBeta,
    ParamRole::Other,
];

mod tag {
    pub const CONV: u8 = 1;
    pub const DENSE: u8 = 2;
    pub const MAXPOOL: u8 = 3;
    pub const DROPOUT: u8 = 4;
    pub const BATCHNORM: u8 = 5;
    pub const ACTIVATION: u8 = 6;
    pub const RESIDUAL: u8 = 7;
    pub const FLATTEN: u8 = 8;
    pub const CLASSIFIER: u8 = 9;

    pub const ACT_RELU: u8 = 1;
    pub const ACT_LEAKY: u8 = 2;
    pub const ACT_ELU: u8 = 3;
    pub const ACT_SINE_RELU: u8 = 4;
    pub const ACT_VLU: u8 = 5;
    pub const ACT_FIXED_PRELU: u8 = 6;
    pub const ACT_FIXED_PVLU: u8 = 7;
    pub const ACT_PRELU: u8 = 8;
    pub const ACT_PVLU: u8 = 9;
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f64]) {
        self.u32(vs.len());
        for &v in vs {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    fn id(&mut self, id: ParamId) {
        self.u32(id.0);
    }

    fn shape(&mut self, dims: &[usize]) {
        self.u32(dims.len());
        for &d in dims {
            self.u32(d);
        }
    }

    fn layers(&mut self, layers: &[Layer]) {
        self.u32(layers.len());
        for layer in layers {
            self.layer(layer);
        }
    }

    fn layer(&mut self, layer: &Layer) {
        match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => {
                self.u8(tag::CONV);
                self.id(*weight);
                self.id(*bias);
                self.u32(*stride);
                self.u8(match padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
            }
            Layer::Dense { weight, bias } => {
                self.u8(tag::DENSE);
                self.id(*weight);
                self.id(*bias);
            }
            Layer::MaxPool { window, stride } => {
                self.u8(tag::MAXPOOL);
                self.u32(*window);
                self.u32(*stride);
            }
            Layer::Dropout { rate } => {
                self.u8(tag::DROPOUT);
                self.f64(*rate);
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                self.u8(tag::BATCHNORM);
                self.id(*gamma);
                self.id(*beta);
                self.f32s(running_mean);
                self.f32s(running_var);
            }
            Layer::Activation(act) => {
                self.u8(tag::ACTIVATION);
                self.activation(act);
            }
            Layer::Residual { inner, projection } => {
                self.u8(tag::RESIDUAL);
                self.layers(inner);
                match projection {
                    None => self.u8(0),
                    Some((w, b)) => {
                        self.u8(1);
                        self.id(*w);
                        self.id(*b);
                    }
                }
            }
            Layer::Flatten => self.u8(tag::FLATTEN),
            Layer::Classifier { weight, bias } => {
                self.u8(tag::CLASSIFIER);
                self.id(*weight);
                self.id(*bias);
            }
        }
    }

    fn activation(&mut self, act: &ActLayer) {
        match act {
            ActLayer::Fixed(kind) => match kind {
                ActivationKind::Relu => self.u8(tag::ACT_RELU),
                ActivationKind::LeakyRelu { slope } => {
                    self.u8(tag::ACT_LEAKY);
                    self.f64(*slope);
                }
                ActivationKind::Elu { a } => {
                    self.u8(tag::ACT_ELU);
                    self.f64(*a);
                }
                ActivationKind::SineRelu { eps } => {
                    self.u8(tag::ACT_SINE_RELU);
                    self.f64(*eps);
                }
                ActivationKind::Vlu { alpha, beta } => {
                    self.u8(tag::ACT_VLU);
                    self.f64(*alpha);
                    self.f64(*beta);
                }
                ActivationKind::Prelu { slope } => {
                    self.u8(tag::ACT_FIXED_PRELU);
                    self.f64s(slope);
                }
                ActivationKind::Pvlu { alpha, beta } => {
                    self.u8(tag::ACT_FIXED_PVLU);
                    self.f64s(alpha);
                    self.f64s(beta);
                }
            },
            ActLayer::Prelu { slope } => {
                self.u8(tag::ACT_PRELU);
                self.id(*slope);
            }
            ActLayer::Pvlu { alpha, beta } => {
                self.u8(tag::ACT_PVLU);
                self.id(*alpha);
                self.id(*beta);
            }
        }
    }
}

/// Serializes a model.
pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.shape(&model.input_shape);
    w.layers(&model.layers);
    w.u32(model.params.len());
    for p in model.params.iter() {
        w.u32(p.name.len());
        w.0.extend_from_slice(p.name.as_bytes());
        w.u8(ROLES
            .iter()
            .position(|&r| r == p.role)
            .unwrap_or(ROLES.len() - 1) as u8);
        w.u8(p.trainable as u8);
        w.shape(p.value.shape());
    }
    for p in model.params.iter() {
        for &v in p.value.data() {
            w.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

type Res<T> = Result<T, Error>;

/// Deepest residual nesting accepted; guards the recursive layer reader.
const MAX_DEPTH: usize = 16;

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Res<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.pos, format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Res<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Res<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self, what: &str) -> Res<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Res<f64> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }

    /// Length prefix, checked against the bytes left so corrupt counts fail fast.
    fn len(&mut self, elem_size: usize, what: &str) -> Res<usize> {
        let at = self.pos;
        let n = self.u32(what)?;
        if n.saturating_mul(elem_size) > self.bytes.len() - self.pos {
            return Err(format_err(
                at,
                format!("{what} length {n} exceeds file size"),
            ));
        }
        Ok(n)
    }

    fn f32s(&mut self, what: &str) -> Res<Vec<f64>> {
        let n = self.len(4, what)?;
        (0..n).map(|_| self.f32(what)).collect()
    }

    fn f64s(&mut self, what: &str) -> Res<Vec<f64>> {
        let n = self.len(8, what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn shape(&mut self, what: &str) -> Res<Vec<usize>> {
        let n = self.len(4, what)?;
        (0..n).map(|_| self.u32(what)).collect()
    }

    fn id(&mut self, refs: &mut Vec<(usize, usize)>) -> Res<ParamId> {
        let at = self.pos;
        let id = self.u32("parameter reference")?;
        refs.push((at, id));
        Ok(ParamId(id))
    }

    fn layers(&mut self, refs: &mut Vec<(usize, usize)>, depth: usize) -> Res<Vec<Layer>> {
        if depth > MAX_DEPTH {
            return Err(format_err(self.pos, "residual blocks nested too deeply"));
        }
        let n = self.len(1, "layer count")?;
        (0..n).map(|_| self.layer(refs, depth)).collect()
    }

    fn layer(&mut self, refs: &mut Vec<(usize, usize)>, depth: usize) -> Res<Layer> {
        let at = self.pos;
        Ok(match self.u8("layer tag")? {
            tag::CONV => {
                let weight = self.id(refs)?;
                let bias = self.id(refs)?;
                let stride = self.u32("conv stride")?;
                let padding = match self.u8("conv padding")? {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    p => return Err(format_err(self.pos - 1, format!("unknown padding {p}"))),
                };
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                }
            }
            tag::DENSE => Layer::Dense {
                weight: self.id(refs)?,
                bias: self.id(refs)?,
            },
            tag::MAXPOOL => Layer::MaxPool {
                window: self.u32("pool window")?,
                stride: self.u32("pool stride")?,
            },
            tag::DROPOUT => {
                let rate = self.f64("dropout rate")?;
                if !(0.0..1.0).contains(&rate) {
                    return Err(format_err(self.pos - 8, format!("dropout rate {rate}")));
                }
                Layer::Dropout { rate }
            }
            tag::BATCHNORM => {
                let gamma = self.id(refs)?;
                let beta = self.id(refs)?;
                let running_mean = self.f32s("running mean")?;
                let running_var = self.f32s("running variance")?;
                if running_mean.len() != running_var.len() {
                    return Err(format_err(at, "running statistics differ in length"));
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }
            }
            tag::ACTIVATION => Layer::Activation(self.activation(refs)?),
            tag::RESIDUAL => {
                let inner = self.layers(refs, depth + 1)?;
                let projection = match self.u8("projection flag")? {
                    0 => None,
                    1 => Some((self.id(refs)?, self.id(refs)?)),
                    f => return Err(format_err(self.pos - 1, format!("projection flag {f}"))),
                };
                Layer::Residual { inner, projection }
            }
            tag::FLATTEN => Layer::Flatten,
            tag::CLASSIFIER => Layer::Classifier {
                weight: self.id(refs)?,
                bias: self.id(refs)?,
            },
            t => return Err(format_err(at, format!("unknown layer tag {t}"))),
        })
    }

    fn activation(&mut self, refs: &mut Vec<(usize, usize)>) -> Res<ActLayer> {
        let at = self.pos;
        let fixed = |k| Ok(ActLayer::Fixed(k));
        match self.u8("activation tag")? {
            tag::ACT_RELU => fixed(ActivationKind::Relu),
            tag::ACT_LEAKY => fixed(ActivationKind::LeakyRelu {
                slope: self.f64("leaky slope")?,
            }),
            tag::ACT_ELU => fixed(ActivationKind::Elu {
                a: self.f64("elu scale")?,
            }),
            tag::ACT_SINE_RELU => fixed(ActivationKind::SineRelu {
                eps: self.f64("sine-relu epsilon")?,
            }),
            tag::ACT_VLU => fixed(ActivationKind::Vlu {
                alpha: self.f64("vlu alpha")?,
                beta: self.f64("vlu beta")?,
            }),
            tag::ACT_FIXED_PRELU => fixed(ActivationKind::Prelu {
                slope: self.f64s("prelu slopes")?,
            }),
            tag::ACT_FIXED_PVLU => {
                let alpha = self.f64s("pvlu alpha")?;
                let beta = self.f64s("pvlu beta")?;
                if alpha.len() != beta.len() {
                    return Err(format_err(at, "pvlu alpha and beta differ in length"));
                }
                fixed(ActivationKind::Pvlu { alpha, beta })
            }
            tag::ACT_PRELU => Ok(ActLayer::Prelu {
                slope: self.id(refs)?,
            }),
            tag::ACT_PVLU => Ok(ActLayer::Pvlu {
                alpha: self.id(refs)?,
                beta: self.id(refs)?,
            }),
            t => Err(format_err(at, format!("unknown activation tag {t}"))),
        }
    }
}

/// Parses a checkpoint. `seed` seeds the dropout stream of the loaded model.
pub fn decode(bytes: &[u8], seed: u64) -> Res<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, not a PVLU checkpoint"));
    }
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let input_shape = r.shape("input shape")?;
    let mut refs = Vec::new();
    let layers = r.layers(&mut refs, 0)?;

    let count = r.len(11, "parameter count")?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len(1, "parameter name")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| format_err(at, "parameter name is not UTF-8"))?
            .to_string();
        let at = r.pos;
        let role = *ROLES
            .get(r.u8("parameter role")? as usize)
            .ok_or_else(|| format_err(at, "unknown parameter role"))?;
        let at = r.pos;
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            f => return Err(format_err(at, format!("trainable flag {f}"))),
        };
        let shape = r.shape("parameter shape")?;
        records.push((name, role, trainable, shape));
    }
    let mut params = ParamStore::new();
    for (name, role, trainable, shape) in records {
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.saturating_mul(4) <= bytes.len() - r.pos)
            .ok_or_else(|| format_err(r.pos, format!("blob for {name} exceeds file size")))?;
        let data = (0..len)
            .map(|_| r.f32("parameter blob"))
            .collect::<Res<Vec<_>>>()?;
        let id = params.add(name, role, Tensor::from_vec(&shape, data)?);
        params.get_mut(id).trainable = trainable;
    }
    if r.pos != bytes.len() {
        return Err(format_err(
            r.pos,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    if let Some(&(at, id)) = refs.iter().find(|&&(_, id)| id >= params.len()) {
        return Err(format_err(
            at,
            format!(
                "layer references parameter {id}, registry has {}",
                params.len()
            ),
        ));
    }
    check_layers(&layers, &params)?;
    Model::from_parts(layers, params, input_shape, seed)
}

/// Shape checks that the forward pass itself would only catch by panicking.
fn check_layers(layers: &[Layer], params: &ParamStore) -> Res<()> {
    let rank = |id: ParamId| params.value(id).rank();
    let len = |id: ParamId| params.value(id).len();
    let bad = |what: &str| Err(format_err(0, format!("inconsistent {what} parameters")));
    for layer in layers {
        match layer {
            Layer::Conv { weight, bias, .. } => {
                if rank(*weight) != 4
                    || rank(*bias) != 1
                    || len(*bias) != params.value(*weight).shape()[0]
                {
                    return bad("conv");
                }
            }
            Layer::Dense { weight, bias } | Layer::Classifier { weight, bias } => {
                if rank(*weight) != 2
                    || rank(*bias) != 1
                    || len(*bias) != params.value(*weight).shape()[1]
                {
                    return bad(layer.name());
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                ..
            } => {
                if len(*gamma) != running_mean.len() || len(*beta) != running_mean.len() {
                    return bad("batchnorm");
                }
            }
            Layer::Activation(ActLayer::Pvlu { alpha, beta }) => {
                if len(*alpha) != len(*beta) || len(*alpha) == 0 {
                    return bad("pvlu");
                }
            }
            Layer::Activation(ActLayer::Prelu { slope }) if len(*slope) == 0 => {
                return bad("prelu");
            }
            Layer::Residual { inner, projection } => {
                check_layers(inner, params)?;
                if let Some((w, b)) = projection {
                    if rank(*w) != 4 || rank(*b) != 1 {
                        return bad("projection");
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> LabResult<()> {
    std::fs::write(path, encode(model)).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path, seed: u64) -> LabResult<Model> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes, seed).map_err(|e| in_file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pvlu_core::{presets, ActivationSpec, LayerSpec, PvluInit};

    fn model(specs: &[LayerSpec], shape: &[usize]) -> Model {
        let mut m = Model::build(specs, shape, 3).unwrap();
        m.round_to_f32();
        m
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let cases = [
            model(
                &presets::six_conv(ActivationSpec::Relu, [2, 3, 4], 5, 3, true),
                &[3, 32, 32],
            ),
            model(
                &presets::residual_cnn(ActivationSpec::Prelu, 2, 4),
                &[1, 8, 8],
            ),
            model(
                &presets::tiny_cnn(ActivationSpec::sine_relu(), 2),
                &[1, 6, 6],
            ),
        ];
        for m in cases {
            let bytes = encode(&m);
            let back = decode(&bytes, 3).unwrap();
            assert_eq!(back.layers, m.layers);
            assert_eq!(back.params, m.params);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn substituted_model_round_trips() {
        let base = model(&presets::tiny_cnn(ActivationSpec::Relu, 2), &[1, 6, 6]);
        let (m, _) = base.substitute_pvlu(PvluInit::Scratch).unwrap();
        let back = decode(&encode(&m), 0).unwrap();
        assert_eq!(back.activation_layers().len(), 2);
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn rejects_corruption_with_offsets() {
        let m = model(&presets::tiny_cnn(ActivationSpec::Relu, 2), &[1, 6, 6]);
        let bytes = encode(&m);
        let offset = |b: &[u8]| match decode(b, 0) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset(&bad), 4);
        // The last blob is the two-element classifier bias.
        assert_eq!(offset(&bytes[..bytes.len() - 1]), bytes.len() - 8);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(&long), bytes.len());
        // First layer tag sits after magic, version and the rank-3 input shape.
        let mut bad = bytes.clone();
        bad[4 + 4 + 16 + 4] = 200;
        assert_eq!(offset(&bad), 28);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let m = model(&presets::tiny_cnn(ActivationSpec::Prelu, 2), &[1, 5, 5]);
        let bytes = encode(&m);
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut], 0).is_err(), "cut at {cut}");
        }
    }
}
