//! Finite-difference verification of every activation and of a whole small model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::{
    act_forward, ActivationKind, PvluInit, DEFAULT_ELU_A, DEFAULT_LEAKY_SLOPE,
    DEFAULT_SINE_RELU_EPS,
};
use crate::autodiff::{
    finite_diff, relative_error, ActOp, Graph, ParamRole, ParamStore, DEFAULT_FD_STEP,
};
use crate::error::{contract_err, Result};
use crate::layers::{presets, ActivationSpec, Model};
use crate::tensor::{Fill, Tensor};

/// Deliberate corruptions used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the PVLU input gradient by 1.01.
    PvluDz,
}

impl Fault {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "pvlu-dz" => Some(Fault::PvluDz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Sampled points per activation kind.
    pub points: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Points closer than this to the origin are skipped.
    pub kink_margin: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            points: 1000,
            seed: 0,
            step: DEFAULT_FD_STEP,
            tolerance: 1e-4,
            kink_margin: 1e-3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn total_samples(&self) -> usize {
        self.cases.iter().map(|c| c.samples).sum()
    }
}

const CHANNELS: usize = 4;
const REL_FLOOR: f64 = 1e-8;

fn sample_points(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z: f64 = rng.random_range(-4.0..4.0);
        if z.abs() > margin {
            out.push(z);
        }
    }
    out
}

struct Case<'a> {
    report: &'a mut Vec<CaseReport>,
    tolerance: f64,
}

impl Case<'_> {
    fn push(&mut self, name: String, analytic: &[f64], numeric: &[f64]) {
        let max = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| relative_error(*a, *n, REL_FLOOR))
            .fold(0.0, f64::max);
        self.report.push(CaseReport {
            name,
            samples: analytic.len(),
            max_rel_err: max,
            passed: max < self.tolerance,
        });
    }
}

/// Checks one activation kind through the autodiff tape.
///
/// The objective is `Σ u ⊙ f(z)` for fixed random `u`, so `∂/∂z = u ⊙ f'(z)`.
fn check_activation(
    kind: &ActivationKind,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    case: &mut Case<'_>,
) -> Result<()> {
    let rows = opts.points.div_ceil(CHANNELS);
    let z = Tensor::from_vec(
        &[rows, CHANNELS],
        sample_points(rng, rows * CHANNELS, opts.kink_margin),
    )?;
    let u = Tensor::from_vec(
        &[rows, CHANNELS],
        (0..rows * CHANNELS)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    )?;

    let mut store = ParamStore::new();
    let params = match kind {
        ActivationKind::Prelu { slope } => {
            vec![store.add(
                "slope",
                ParamRole::PreluSlope,
                Tensor::from_vec(&[CHANNELS], slope.clone())?,
            )]
        }
        ActivationKind::Pvlu { alpha, beta } => vec![
            store.add(
                "alpha",
                ParamRole::PvluAlpha,
                Tensor::from_vec(&[CHANNELS], alpha.clone())?,
            ),
            store.add(
                "beta",
                ParamRole::PvluBeta,
                Tensor::from_vec(&[CHANNELS], beta.clone())?,
            ),
        ],
        _ => Vec::new(),
    };
    let objective = |store: &ParamStore, z: &Tensor| -> Result<f64> {
        let k = match kind {
            ActivationKind::Prelu { .. } => ActivationKind::Prelu {
                slope: store.value(params[0]).data().to_vec(),
            },
            ActivationKind::Pvlu { .. } => ActivationKind::Pvlu {
                alpha: store.value(params[0]).data().to_vec(),
                beta: store.value(params[1]).data().to_vec(),
            },
            other => other.clone(),
        };
        let y = act_forward(&k, z)?;
        Ok(y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
    };

    let mut g = Graph::new();
    let zn = g.input_with_grad(z.clone());
    let op = match kind {
        ActivationKind::Prelu { .. } => ActOp::Prelu {
            slope: g.param(&store, params[0]),
        },
        ActivationKind::Pvlu { .. } => ActOp::Pvlu {
            alpha: g.param(&store, params[0]),
            beta: g.param(&store, params[1]),
        },
        other => ActOp::Fixed(other.clone()),
    };
    let y = g.activation(zn, op)?;
    let un = g.input(u.clone());
    let prod = g.mul(y, un)?;
    let loss = g.sum(prod)?;
    if opts.fault == Some(Fault::PvluDz) {
        g.inject_pvlu_dz_fault();
    }
    let grads = g.backward(loss, &mut store)?;

    let dz = grads
        .node(zn)
        .ok_or_else(|| contract_err!("no input gradient recorded"))?
        .data()
        .to_vec();
    // The function is elementwise, so shifting every entry at once differentiates each entry.
    let h = opts.step;
    let up = act_forward(kind, &z.map(|v| v + h))?;
    let down = act_forward(kind, &z.map(|v| v - h))?;
    let numeric: Vec<f64> = up
        .data()
        .iter()
        .zip(down.data())
        .zip(u.data())
        .map(|((a, b), w)| w * (a - b) / (2.0 * h))
        .collect();
    case.push(format!("{}-dz", kind.name()), &dz, &numeric);

    let labels: &[&str] = match kind {
        ActivationKind::Prelu { .. } => &["slope"],
        ActivationKind::Pvlu { .. } => &["alpha", "beta"],
        _ => &[],
    };
    for (&id, label) in params.iter().zip(labels) {
        let analytic = grads
            .param(id)
            .ok_or_else(|| contract_err!("no gradient for {label}"))?
            .data()
            .to_vec();
        let numeric = finite_diff(|s| objective(s, &z), &mut store, id, h)?;
        case.push(
            format!("{}-{label}", kind.name()),
            &analytic,
            numeric.data(),
        );
    }
    Ok(())
}

/// Every parameter of a two-convolution PVLU network, cross-entropy loss, batch of four.
fn check_model(opts: &GradcheckOptions, case: &mut Case<'_>) -> Result<()> {
    let specs = presets::tiny_cnn(ActivationSpec::Pvlu(PvluInit::Scratch), 3);
    let mut model = Model::build(&specs, &[2, 6, 6], opts.seed)?;
    let x = Tensor::create(
        &[4, 2, 6, 6],
        Fill::SeededNormal {
            mean: 0.0,
            std: 1.0,
            seed: opts.seed ^ 0x9e37,
        },
    )?;
    let labels = [0usize, 1, 2, 1];
    let mut fwd = model.trace(&x, false)?;
    let loss = fwd.graph.softmax_cross_entropy(fwd.logits, &labels)?;
    if opts.fault == Some(Fault::PvluDz) {
        fwd.graph.inject_pvlu_dz_fault();
    }
    let grads = fwd.graph.backward(loss, &mut model.params)?;
    let reference = model.clone();
    let objective = |store: &ParamStore| -> Result<f64> {
        let mut probe = reference.clone();
        probe.params = store.clone();
        let mut f = probe.trace(&x, false)?;
        let l = f.graph.softmax_cross_entropy(f.logits, &labels)?;
        f.graph.value(l).item()
    };
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|p| (p.id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let analytic = grads
            .param(id)
            .ok_or_else(|| contract_err!("no gradient for {name}"))?
            .data()
            .to_vec();
        let numeric = finite_diff(&objective, &mut model.params, id, opts.step)?;
        case.push(format!("tiny-cnn:{name}"), &analytic, numeric.data());
    }
    Ok(())
}

/// The kinds checked by [`run_gradcheck`], with randomised channel parameters.
pub fn activation_suite(rng: &mut ChaCha8Rng) -> Vec<ActivationKind> {
    vec![
        ActivationKind::Relu,
        ActivationKind::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        },
        ActivationKind::Elu { a: DEFAULT_ELU_A },
        ActivationKind::Prelu {
            slope: (0..CHANNELS).map(|_| rng.random_range(0.05..0.5)).collect(),
        },
        ActivationKind::SineRelu {
            eps: DEFAULT_SINE_RELU_EPS,
        },
        ActivationKind::Vlu {
            alpha: 0.5,
            beta: 1.0,
        },
        ActivationKind::Pvlu {
            alpha: (0..CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
            beta: (0..CHANNELS).map(|_| rng.random_range(0.2..2.0)).collect(),
        },
    ]
}

/// Runs the full suite: all activation kinds, then the whole tiny model.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.points == 0 || opts.step.is_nan() || opts.step <= 0.0 {
        return Err(contract_err!(
            "gradcheck needs at least one point and a positive step"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::new();
    let mut case = Case {
        report: &mut cases,
        tolerance: opts.tolerance,
    };
    for kind in activation_suite(&mut rng) {
        check_activation(&kind, opts, &mut rng, &mut case)?;
    }
    check_model(opts, &mut case)?;
    Ok(GradcheckReport {
        options: opts.clone(),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_kind() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.failing());
        for name in [
            "relu-dz",
            "leaky-dz",
            "elu-dz",
            "prelu-dz",
            "prelu-slope",
            "sinerelu-dz",
            "vlu-dz",
            "pvlu-dz",
            "pvlu-alpha",
            "pvlu-beta",
        ] {
            let c = report
                .cases
                .iter()
                .find(|c| c.name == name)
                .unwrap_or_else(|| panic!("missing {name}"));
            assert!(c.samples >= 4);
        }
        let dz = report.cases.iter().find(|c| c.name == "pvlu-dz").unwrap();
        assert!(dz.samples >= 1000);
        assert!(
            report
                .cases
                .iter()
                .filter(|c| c.name.starts_with("tiny-cnn:"))
                .count()
                >= 6
        );
    }

    #[test]
    fn injected_fault_is_reported() {
        let opts = GradcheckOptions {
            fault: Some(Fault::PvluDz),
            points: 200,
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed());
        assert!(report.failing().contains(&"pvlu-dz"));
        assert!(!report.failing().contains(&"relu-dz"));
        // The corrupted input gradient flows upstream into the first convolution.
        assert!(report.failing().contains(&"tiny-cnn:0.conv.weight"));
    }
}
