//! Optimizers, seeded training and fine-tuning, and trial statistics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::PvluInit;
use crate::autodiff::ParamStore;
use crate::data::{augment_batch, AugmentConfig, Dataset};
use crate::error::{contract_err, numeric_err, shape_err, Error, Result};
use crate::layers::{dead_units, FreezePolicy, Mode, Model, ParamGroup};
use crate::tensor::Tensor;

/// Training loss above this aborts the run as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;
/// Samples from the test split used for the per-epoch dead-unit census.
pub const PROBE_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum }
    }

    /// Adam(1e-3), used for training from scratch.
    pub fn scratch_default() -> Self {
        Self::adam(1e-3)
    }

    /// SGD(1e-3, momentum 0.9), used for fine-tuning.
    pub fn finetune_default() -> Self {
        Self::sgd(1e-3, 0.9)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(contract_err!("invalid optimizer settings {self:?}"))
        }
    }
}

/// Optimizer plus its per-parameter state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    ///
    /// Non-trainable parameters are skipped entirely.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.steps += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), Vec::new());
            self.second.resize(params.len(), Vec::new());
        }
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let i = p.id.0;
            let n = p.value.len();
            if self.first[i].len() != n {
                self.first[i] = vec![0.0; n];
            }
            let grad = p.grad.data();
            match self.optimizer {
                Optimizer::Sgd { lr, momentum } => {
                    let v = &mut self.first[i];
                    for ((w, vk), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                        *vk = momentum * *vk + g;
                        *w -= lr * *vk;
                    }
                }
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    if self.second[i].len() != n {
                        self.second[i] = vec![0.0; n];
                    }
                    let t = self.steps as f64;
                    let c1 = 1.0 - libm::pow(beta1, t);
                    let c2 = 1.0 - libm::pow(beta2, t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        *w -= lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub optimizer: Optimizer,
    pub seeds: Vec<u64>,
    pub augment: AugmentConfig,
    pub freeze: FreezePolicy,
    /// Before which epoch (0-based) ReLU activations are swapped for PVLU.
    pub substitute_at: Option<usize>,
    pub substitute_init: PvluInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            eval_batch: 256,
            optimizer: Optimizer::scratch_default(),
            seeds: vec![0],
            augment: AugmentConfig::NONE,
            freeze: FreezePolicy::All,
            substitute_at: None,
            substitute_init: PvluInit::Finetune,
        }
    }
}

impl TrainConfig {
    /// Settings for fine-tuning: SGD, PVLU parameters and batch norm trainable.
    pub fn finetune(epochs: usize) -> Self {
        Self {
            epochs,
            optimizer: Optimizer::finetune_default(),
            freeze: FreezePolicy::Only(vec![ParamGroup::Pvlu, ParamGroup::BatchNorm]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(contract_err!("batch sizes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(contract_err!("at least one seed is required"));
        }
        self.optimizer.validate()
    }
}

/// Metrics recorded after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Share of activation units dead over the whole probe batch.
    pub dead_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub activation: String,
    pub epochs: Vec<EpochMetrics>,
    /// Metrics of the untouched model before any training step (fine-tuning only).
    pub initial: Option<EpochMetrics>,
    pub peak_test_acc: f64,
    /// Filled in by callers that own a clock.
    pub wall_time_secs: f64,
}

impl TrialResult {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy and number of correct predictions for a logits batch.
fn score(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    (loss, correct)
}

/// Mean cross-entropy and accuracy of `model` in eval mode.
pub fn evaluate(model: &Model, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(contract_err!("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch.max(1)).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = ds.batch(&idx)?;
        let (l, c) = score(&model.infer(&x)?, &y);
        loss += l;
        correct += c;
        start = end;
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

fn dead_fraction(model: &Model, probe: &Tensor) -> Result<f64> {
    let report = dead_units(model, probe)?;
    let units: usize = report.iter().map(|r| r.units).sum();
    let dead: usize = report.iter().map(|r| r.dead).sum();
    Ok(if units == 0 {
        0.0
    } else {
        dead as f64 / units as f64
    })
}

fn check_shapes(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.image_shape() != model.input_shape.as_slice() {
        return Err(shape_err!(
            "dataset images {:?} do not match model input {:?}",
            ds.image_shape(),
            model.input_shape
        ));
    }
    Ok(())
}

fn probe_batch(test: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..test.len().min(PROBE_SAMPLES)).collect();
    Ok(test.batch(&idx)?.0)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => numeric_err!("epoch {epoch}, batch {batch}: {msg}"),
        other => other,
    }
}

/// Trains `model` on `train`, evaluating on `test` after every epoch.
///
/// The run is a pure function of `(model, data, cfg, seed)`: shuffling,
/// augmentation and dropout all draw from streams seeded by `seed`.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    check_shapes(model, train)?;
    check_shapes(model, test)?;
    if train.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    if cfg.epochs == 0 {
        return Err(contract_err!("epochs must be at least 1"));
    }
    cfg.augment.validate(train.image_shape())?;
    model.reseed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = train.channel_means();
    let probe = probe_batch(test)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    if cfg.substitute_at != Some(0) {
        model.set_trainable(&cfg.freeze)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.substitute_at == Some(epoch) {
            let (swapped, _) = model.substitute_pvlu(cfg.substitute_init)?;
            *model = swapped;
            model.set_trainable(&cfg.freeze)?;
        }
        order.shuffle(&mut rng);
        model.params.zero_grads();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let x = augment_batch(&x, &cfg.augment, &fill, &mut rng)?;
            model.set_mode(Mode::Train);
            let step = (|| -> Result<()> {
                let mut fwd = model.forward(&x)?;
                let loss = fwd.graph.softmax_cross_entropy(fwd.logits, &y)?;
                let value = fwd.graph.value(loss).item()?;
                if !value.is_finite() || value > DIVERGENCE_LOSS {
                    return Err(numeric_err!("training loss {value} (diverged)"));
                }
                let (_, c) = score(fwd.graph.value(fwd.logits), &y);
                loss_sum += value * y.len() as f64;
                correct += c;
                fwd.graph.backward(loss, &mut model.params)?;
                opt.step(&mut model.params);
                model.params.zero_grads();
                Ok(())
            })();
            model.set_mode(Mode::Eval);
            step.map_err(|e| with_context(e, epoch + 1, b))?;
        }
        let (test_loss, test_acc) = evaluate(model, test, cfg.eval_batch)?;
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_loss,
            test_acc,
            dead_frac: dead_fraction(model, &probe)?,
        });
    }
    let peak_test_acc = epochs
        .iter()
        .map(|m| m.test_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(TrialResult {
        seed,
        activation: activation_label(model),
        epochs,
        initial: None,
        peak_test_acc,
        wall_time_secs: 0.0,
    })
}

/// Names the activation family of a model (`"mixed"` if several).
pub fn activation_label(model: &Model) -> String {
    let acts = model.activation_layers();
    let Some((_, first)) = acts.first() else {
        return "none".to_string();
    };
    let name = first.name();
    if acts.iter().all(|(_, a)| a.name() == name) {
        name.to_string()
    } else {
        "mixed".to_string()
    }
}

/// Swaps every ReLU of `pretrained` for an identity-initialised PVLU, applies
/// the freeze policy from `cfg` and trains.
///
/// `initial` records the substituted model before any update. Its test
/// accuracy equals the pretrained model's. With zero epochs no training runs
/// and the model is returned as substituted.
pub fn finetune(
    pretrained: &Model,
    train_ds: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrialResult)> {
    let (mut model, _) = pretrained.substitute_pvlu(PvluInit::Finetune)?;
    model.set_trainable(&cfg.freeze)?;
    let (train_loss, train_acc) = evaluate(&model, train_ds, cfg.eval_batch)?;
    let (test_loss, test_acc) = evaluate(&model, test, cfg.eval_batch)?;
    let initial = EpochMetrics {
        epoch: 0,
        train_loss,
        train_acc,
        test_loss,
        test_acc,
        dead_frac: dead_fraction(&model, &probe_batch(test)?)?,
    };
    let mut result = if cfg.epochs == 0 {
        TrialResult {
            seed,
            activation: activation_label(&model),
            epochs: Vec::new(),
            initial: None,
            peak_test_acc: test_acc,
            wall_time_secs: 0.0,
        }
    } else {
        let cfg = TrainConfig {
            substitute_at: None,
            ..cfg.clone()
        };
        train(&mut model, train_ds, test, &cfg, seed)?
    };
    result.initial = Some(initial);
    Ok((model, result))
}

/// `(e_i − e_f) / e_i` with `e = 1 − accuracy`.
pub fn rel_error_decrease(acc_before: f64, acc_after: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc_before) || !(0.0..=1.0).contains(&acc_after) {
        return Err(contract_err!(
            "accuracies must lie in [0, 1], got {acc_before} and {acc_after}"
        ));
    }
    if acc_before == 1.0 {
        return Err(contract_err!("initial error is zero"));
    }
    let (ei, ef) = (1.0 - acc_before, 1.0 - acc_after);
    Ok((ei - ef) / ei)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub activation: String,
    pub mean_peak: f64,
    /// Sample standard deviation over √n; `None` for a single trial.
    pub std_err: Option<f64>,
    pub n: usize,
}

/// Mean and standard error of per-trial peak accuracies.
pub fn summarize(activation: &str, peaks: &[f64]) -> Result<Summary> {
    let n = peaks.len();
    if n == 0 {
        return Err(contract_err!("cannot summarise zero trials"));
    }
    let mean = peaks.iter().sum::<f64>() / n as f64;
    let std_err = (n >= 2).then(|| {
        let var = peaks.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1) as f64;
        libm::sqrt(var) / libm::sqrt(n as f64)
    });
    Ok(Summary {
        activation: activation.to_string(),
        mean_peak: mean,
        std_err,
        n,
    })
}

/// [`summarize`] after dropping collapsed trials whose peak is below `floor`.
pub fn summarize_excluding(activation: &str, peaks: &[f64], floor: f64) -> Result<Summary> {
    let kept: Vec<f64> = peaks.iter().copied().filter(|&p| p >= floor).collect();
    summarize(activation, &kept)
}

/// Summary over trial results.
pub fn summarize_trials(activation: &str, trials: &[TrialResult]) -> Result<Summary> {
    let peaks: Vec<f64> = trials.iter().map(|t| t.peak_test_acc).collect();
    summarize(activation, &peaks)
}

/// Per-layer fractions of activation units whose local derivative is zero for every probe sample.
pub fn dying_neuron_report(model: &Model, probe: &Tensor) -> Result<Vec<(String, f64)>> {
    Ok(dead_units(model, probe)?
        .into_iter()
        .map(|d| {
            (
                format!("{}:{}", crate::layers::path_label(&d.path), d.kind),
                d.fraction(),
            )
        })
        .collect())
}
