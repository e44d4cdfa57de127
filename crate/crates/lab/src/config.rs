//! Experiment configuration files.
//!
//! Configs are TOML documents with the sections `[data]`, `[model]`,
//! `[train]`, `[augment]`, `[compare]`, `[finetune]` and `[output]`. Unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.
//!
//! ```toml
//! [data]
//! format = "idx"                  # idx | cifar | separable | cifar-like
//! train_images = "train-images.idx"
//! train_labels = "train-labels.idx"
//! test_images = "test-images.idx"
//! test_labels = "test-labels.idx"
//!
//! [model]
//! preset = "mnist-cnn"            # or: layers = ["conv 8 3 same", "act", ...]
//! activation = "relu"
//!
//! [train]
//! epochs = 5
//! seeds = [0, 1, 2]
//!
//! [compare]
//! activations = ["relu", "pvlu"]
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use pvlu_core::data::AugmentConfig;
use pvlu_core::{
    presets, ActivationSpec, FreezePolicy, LayerKind, LayerSpec, Optimizer, Padding, ParamGroup,
    PvluInit, TrainConfig,
};
use serde::Deserialize;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    Cifar,
    /// Generated two-class blob images.
    Separable,
    /// Generated ten-class colour shapes at CIFAR resolution.
    CifarLike,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CIFAR binary batch files.
    #[serde(default)]
    pub train_batches: Vec<PathBuf>,
    #[serde(default)]
    pub test_batches: Vec<PathBuf>,
    #[serde(default = "one")]
    pub label_bytes: usize,
    pub classes: Option<usize>,
    /// Keep only the first n samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Sample counts for generated sets.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    /// Image side for `separable`.
    #[serde(default = "default_side")]
    pub side: usize,
    /// Generator seed; the test split uses `seed + 1`.
    #[serde(default)]
    pub seed: u64,
    /// Standardize channels with statistics of the training split.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub layers: Option<Vec<String>>,
    #[serde(default = "default_activation")]
    pub activation: String,
    /// `six-conv` stage widths.
    #[serde(default = "default_widths")]
    pub widths: [usize; 3],
    /// `six-conv` dense width.
    #[serde(default = "default_dense")]
    pub dense: usize,
    #[serde(default)]
    pub batchnorm: bool,
    /// `residual-cnn` stem width.
    #[serde(default = "default_width")]
    pub width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: None,
            layers: None,
            activation: default_activation(),
            widths: default_widths(),
            dense: default_dense(),
            batchnorm: false,
            width: default_width(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_adam")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Parameter groups left trainable, or `["all"]`.
    #[serde(default = "default_all")]
    pub trainable: Vec<String>,
    /// Epoch before which ReLU is swapped for PVLU.
    pub substitute_at: Option<usize>,
    #[serde(default = "default_substitute_init")]
    pub substitute_init: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default)]
    pub flip_prob: f64,
    #[serde(default)]
    pub max_shift: usize,
    pub cutout: Option<usize>,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default)]
    pub activations: Vec<String>,
    /// Reference arm for the relative error decrease; defaults to the first activation.
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sgd")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_finetune_groups")]
    pub trainable: Vec<String>,
    /// Blur both splits with a Gaussian filter before fine-tuning and evaluation.
    #[serde(default)]
    pub gaussian_noise: bool,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Epochs of training only `final_layers` on the ReLU model before substitution.
    #[serde(default)]
    pub head_epochs: usize,
    #[serde(default = "default_final_layers")]
    pub final_layers: Vec<String>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn one() -> usize {
    1
}
fn default_train_size() -> usize {
    200
}
fn default_test_size() -> usize {
    100
}
fn default_side() -> usize {
    8
}
fn default_activation() -> String {
    "relu".into()
}
fn default_widths() -> [usize; 3] {
    [8, 16, 32]
}
fn default_dense() -> usize {
    64
}
fn default_width() -> usize {
    8
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_eval_batch() -> usize {
    256
}
fn default_adam() -> String {
    "adam".into()
}
fn default_sgd() -> String {
    "sgd".into()
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-7
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_all() -> Vec<String> {
    vec!["all".into()]
}
fn default_substitute_init() -> String {
    "finetune".into()
}
fn default_finetune_groups() -> Vec<String> {
    vec!["pvlu".into(), "batchnorm".into()]
}
fn default_sigma() -> f64 {
    1.0
}
fn default_final_layers() -> Vec<String> {
    vec!["classifier".into()]
}
fn default_out() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Reads and validates a config file. Data paths are checked for existence.
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, base)
            .map_err(|e| LabError::config(format!("{}: {e}", path.display())))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Parses and validates config text without touching the filesystem.
    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, String> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        let d = &self.data;
        match d.format {
            DataFormat::Idx => {
                for (key, v) in [
                    ("train_images", &d.train_images),
                    ("train_labels", &d.train_labels),
                    ("test_images", &d.test_images),
                    ("test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        return Err(format!("data.{key} is required for idx data"));
                    }
                }
            }
            DataFormat::Cifar => {
                if d.train_batches.is_empty() || d.test_batches.is_empty() {
                    return Err(
                        "data.train_batches and data.test_batches are required for cifar data"
                            .into(),
                    );
                }
            }
            DataFormat::Separable | DataFormat::CifarLike => {
                if d.train_size == 0 || d.test_size == 0 {
                    return Err("data.train_size and data.test_size must be positive".into());
                }
            }
        }
        if self.model.preset.is_some() && self.model.layers.is_some() {
            return Err("model.preset and model.layers are mutually exclusive".into());
        }
        activation(&self.model.activation)?;
        // Builds the specs once so layer-list typos surface before any data is read.
        self.model_specs(ActivationSpec::Relu, 2)?;
        self.train_config()?;
        self.finetune_config()?;
        groups(&self.finetune.final_layers)?;
        for a in &self.compare.activations {
            activation(a)?;
        }
        if let Some(b) = &self.compare.baseline {
            if !self.compare.activations.contains(b) {
                return Err(format!(
                    "compare.baseline {b:?} is not in compare.activations"
                ));
            }
        }
        if !(self.finetune.sigma > 0.0 && self.finetune.sigma.is_finite()) {
            return Err("finetune.sigma must be positive".into());
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Every data file the config refers to, resolved.
    pub fn data_paths(&self) -> Vec<PathBuf> {
        let d = &self.data;
        [
            &d.train_images,
            &d.train_labels,
            &d.test_images,
            &d.test_labels,
        ]
        .into_iter()
        .flatten()
        .chain(&d.train_batches)
        .chain(&d.test_batches)
        .map(|p| self.resolve(p))
        .collect()
    }

    fn check_paths(&self) -> LabResult<()> {
        for p in self.data_paths() {
            if !p.is_file() {
                return Err(LabError::config(format!(
                    "data file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        match override_dir {
            Some(d) => d.to_path_buf(),
            None => self.resolve(&self.output.dir),
        }
    }

    pub fn activation(&self) -> ActivationSpec {
        activation(&self.model.activation).expect("validated")
    }

    /// Activations of a comparison, each with its config name.
    pub fn compare_activations(&self) -> Vec<(String, ActivationSpec)> {
        self.compare
            .activations
            .iter()
            .map(|a| (a.clone(), activation(a).expect("validated")))
            .collect()
    }

    pub fn model_specs(
        &self,
        act: ActivationSpec,
        classes: usize,
    ) -> Result<Vec<LayerSpec>, String> {
        let m = &self.model;
        if let Some(layers) = &m.layers {
            if layers.is_empty() {
                return Err("model.layers is empty".into());
            }
            return layers
                .iter()
                .map(|l| parse_layer(l, act))
                .collect::<Result<_, _>>()
                .map_err(|e| format!("model.layers: {e}"));
        }
        Ok(match m.preset.as_deref().unwrap_or("tiny-cnn") {
            "tiny-cnn" => presets::tiny_cnn(act, classes),
            "mnist-cnn" => {
                let mut specs = presets::mnist_cnn(act);
                specs.pop();
                specs.push(LayerSpec::classifier(classes));
                specs
            }
            "six-conv" => presets::six_conv(act, m.widths, m.dense, classes, m.batchnorm),
            "residual-cnn" => presets::residual_cnn(act, m.width, classes),
            other => return Err(format!("unknown model.preset {other:?}")),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err("train.epochs must be at least 1".into());
        }
        let substitute_init = match t.substitute_init.as_str() {
            "finetune" => PvluInit::Finetune,
            "scratch" => PvluInit::Scratch,
            other => return Err(format!("unknown train.substitute_init {other:?}")),
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch: t.eval_batch,
            optimizer: optimizer(&t.optimizer, t.lr, t.momentum, t.beta1, t.beta2, t.eps)?,
            seeds: t.seeds.clone(),
            augment: AugmentConfig {
                flip_prob: self.augment.flip_prob,
                max_shift: self.augment.max_shift,
                cutout: self.augment.cutout,
                blur_sigma: self.augment.blur_sigma,
            },
            freeze: freeze_policy(&t.trainable)?,
            substitute_at: t.substitute_at,
            substitute_init,
        };
        cfg.validate().map_err(|e| format!("train: {e}"))?;
        if !(0.0..=1.0).contains(&cfg.augment.flip_prob) {
            return Err("augment.flip_prob must lie in [0, 1]".into());
        }
        Ok(cfg)
    }

    /// Fine-tuning settings; zero epochs is allowed and only evaluates.
    pub fn finetune_config(&self) -> Result<TrainConfig, String> {
        let f = &self.finetune;
        let base = self.train_config()?;
        let cfg = TrainConfig {
            epochs: f.epochs,
            optimizer: optimizer(&f.optimizer, f.lr, f.momentum, f.beta1, f.beta2, f.eps)?,
            freeze: freeze_policy(&f.trainable)?,
            substitute_at: None,
            ..base
        };
        cfg.validate().map_err(|e| format!("finetune: {e}"))?;
        Ok(cfg)
    }

    pub fn final_layers(&self) -> FreezePolicy {
        FreezePolicy::Only(groups(&self.finetune.final_layers).expect("validated"))
    }
}

fn activation(name: &str) -> Result<ActivationSpec, String> {
    ActivationSpec::parse(name).ok_or_else(|| format!("unknown activation {name:?}"))
}

fn optimizer(
    kind: &str,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Optimizer, String> {
    match kind {
        "sgd" => Ok(Optimizer::Sgd { lr, momentum }),
        "adam" => Ok(Optimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
        }),
        other => Err(format!("unknown optimizer {other:?}")),
    }
}

fn groups(names: &[String]) -> Result<Vec<ParamGroup>, String> {
    if names.is_empty() {
        return Err("parameter group list is empty".into());
    }
    names
        .iter()
        .map(|n| ParamGroup::parse(n).ok_or_else(|| format!("unknown parameter group {n:?}")))
        .collect()
}

fn freeze_policy(names: &[String]) -> Result<FreezePolicy, String> {
    if names.len() == 1 && names[0] == "all" {
        return Ok(FreezePolicy::All);
    }
    groups(names).map(FreezePolicy::Only)
}

fn number(tok: Option<&str>, what: &str) -> Result<usize, String> {
    tok.ok_or_else(|| format!("missing {what}"))?
        .parse()
        .map_err(|_| format!("bad {what}"))
}

/// Parses one entry of an inline layer list.
///
/// `conv F K [same|valid] [stride S]`, `dense U`, `maxpool W S`,
/// `dropout R`, `batchnorm`, `act [NAME]` (no name: the run's activation),
/// `flatten`, `classifier C`, `residual(L1; L2; ...)`. A trailing `frozen`
/// marks the layer non-trainable.
pub fn parse_layer(text: &str, act: ActivationSpec) -> Result<LayerSpec, String> {
    let text = text.trim();
    let (text, frozen) = match text.strip_suffix("frozen") {
        Some(rest) if rest.ends_with(char::is_whitespace) || rest.ends_with(')') => {
            (rest.trim(), true)
        }
        _ => (text, false),
    };
    let spec = if let Some(inner) = text
        .strip_prefix("residual(")
        .and_then(|s| s.strip_suffix(')'))
    {
        if inner.contains('(') {
            return Err("nested residual blocks are not supported in layer lists".into());
        }
        let inner = inner
            .split(';')
            .map(|l| parse_layer(l, act))
            .collect::<Result<Vec<_>, _>>()?;
        LayerSpec::residual(inner)
    } else {
        let mut toks = text.split_whitespace();
        let head = toks.next().ok_or("empty layer")?;
        let spec = match head {
            "conv" => {
                let filters = number(toks.next(), "conv filters")?;
                let kernel = number(toks.next(), "conv kernel")?;
                let mut padding = Padding::Valid;
                let mut stride = 1;
                while let Some(t) = toks.next() {
                    match t {
                        "same" => padding = Padding::Same,
                        "valid" => padding = Padding::Valid,
                        "stride" => stride = number(toks.next(), "conv stride")?,
                        other => return Err(format!("unexpected {other:?} in {text:?}")),
                    }
                }
                LayerSpec::new(LayerKind::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                })
            }
            "dense" => LayerSpec::dense(number(toks.next(), "dense units")?),
            "maxpool" => {
                let w = number(toks.next(), "pool window")?;
                let s = toks
                    .next()
                    .map_or(Ok(w), |t| number(Some(t), "pool stride"))?;
                LayerSpec::maxpool(w, s)
            }
            "dropout" => {
                let rate: f64 = toks
                    .next()
                    .ok_or("missing dropout rate")?
                    .parse()
                    .map_err(|_| "bad dropout rate".to_string())?;
                LayerSpec::dropout(rate)
            }
            "batchnorm" => LayerSpec::batchnorm(),
            "act" => LayerSpec::activation(match toks.next() {
                Some(name) => activation(name)?,
                None => act,
            }),
            "flatten" => LayerSpec::flatten(),
            "classifier" => LayerSpec::classifier(number(toks.next(), "class count")?),
            other => return Err(format!("unknown layer {other:?}")),
        };
        if let Some(extra) = toks.next() {
            return Err(format!("unexpected {extra:?} in {text:?}"));
        }
        spec
    };
    Ok(if frozen { spec.frozen() } else { spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\nformat = \"separable\"\n";

    fn parse(text: &str) -> Result<ExperimentConfig, String> {
        ExperimentConfig::parse(text, PathBuf::new())
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(MINIMAL).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.epochs, 5);
        assert_eq!(t.optimizer, Optimizer::scratch_default());
        let f = cfg.finetune_config().unwrap();
        assert_eq!(f.optimizer, Optimizer::finetune_default());
        assert_eq!(
            f.freeze,
            FreezePolicy::Only(vec![ParamGroup::Pvlu, ParamGroup::BatchNorm])
        );
        assert_eq!(
            cfg.final_layers(),
            FreezePolicy::Only(vec![ParamGroup::Classifier])
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[data]\nformat = \"separable\"\ncolour = 1\n",
            "[data]\nformat = \"separable\"\n[train]\nepoch = 3\n",
            "[data]\nformat = \"separable\"\n[extra]\n",
            "bogus = 1\n[data]\nformat = \"separable\"\n",
        ] {
            let err = parse(text).unwrap_err();
            assert!(err.contains("unknown"), "{err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (extra, needle) in [
            ("[model]\nactivation = \"swish\"\n", "activation"),
            ("[model]\npreset = \"vgg\"\n", "preset"),
            ("[train]\nepochs = 0\n", "epochs"),
            ("[train]\noptimizer = \"rmsprop\"\n", "optimizer"),
            ("[train]\nseeds = []\n", "seed"),
            ("[train]\ntrainable = [\"weights\"]\n", "group"),
            (
                "[compare]\nactivations = [\"relu\"]\nbaseline = \"pvlu\"\n",
                "baseline",
            ),
            ("[model]\nlayers = [\"conv 4\"]\n", "kernel"),
        ] {
            let err = parse(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(err.contains(needle), "{extra}: {err}");
        }
        assert!(parse("[data]\nformat = \"idx\"\n")
            .unwrap_err()
            .contains("train_images"));
    }

    #[test]
    fn layer_lists_parse() {
        let act = ActivationSpec::Relu;
        assert_eq!(
            parse_layer("conv 8 3 same", act).unwrap(),
            LayerSpec::conv(8, 3, Padding::Same)
        );
        assert_eq!(
            parse_layer("conv 8 3 stride 2", act).unwrap().kind,
            LayerKind::Conv {
                filters: 8,
                kernel: 3,
                stride: 2,
                padding: Padding::Valid
            }
        );
        assert_eq!(
            parse_layer("maxpool 2", act).unwrap(),
            LayerSpec::maxpool(2, 2)
        );
        assert_eq!(
            parse_layer("act", ActivationSpec::Prelu).unwrap(),
            LayerSpec::activation(ActivationSpec::Prelu)
        );
        assert_eq!(
            parse_layer("act elu", act).unwrap(),
            LayerSpec::activation(ActivationSpec::elu())
        );
        assert_eq!(
            parse_layer("dense 10 frozen", act).unwrap(),
            LayerSpec::dense(10).frozen()
        );
        assert_eq!(
            parse_layer("residual(conv 4 3 same; batchnorm; act)", act).unwrap(),
            LayerSpec::residual(vec![
                LayerSpec::conv(4, 3, Padding::Same),
                LayerSpec::batchnorm(),
                LayerSpec::activation(act),
            ])
        );
        for bad in [
            "",
            "conv",
            "dense x",
            "pool 2",
            "flatten 3",
            "residual(residual(flatten))",
        ] {
            assert!(parse_layer(bad, act).is_err(), "{bad}");
        }
    }

    #[test]
    fn mnist_preset_follows_class_count() {
        let cfg = parse(&format!("{MINIMAL}[model]\npreset = \"mnist-cnn\"\n")).unwrap();
        let specs = cfg.model_specs(ActivationSpec::Relu, 3).unwrap();
        assert_eq!(specs.last().unwrap(), &LayerSpec::classifier(3));
    }
}
