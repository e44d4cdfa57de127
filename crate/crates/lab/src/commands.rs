//! The command workflows behind the `pvlu` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pvlu_core::data::{encode_cifar, encode_idx, synthetic};
use pvlu_core::gradcheck::{run_gradcheck, Fault, GradcheckOptions, GradcheckReport};
use pvlu_core::harness::{evaluate, summarize_trials};
use pvlu_core::{
    finetune, rel_error_decrease, train, ActivationSpec, Dataset, Model, Split, Summary,
    TrainConfig, TrialResult,
};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::datasets;
use crate::error::{exit, LabError, LabResult};
use crate::metrics::{self, sig6};
use crate::plot::{self, Series};
use crate::pool::run_ordered;

/// Flag overrides shared by the config-driven commands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Everything a config-driven command needs, validated before any output is written.
struct Prepared {
    cfg: ExperimentConfig,
    train_cfg: TrainConfig,
    train: Dataset,
    test: Dataset,
    out: PathBuf,
}

fn prepare(config: &Path, ov: &Overrides) -> LabResult<Prepared> {
    let cfg = ExperimentConfig::load(config)?;
    let mut train_cfg = cfg.train_config().map_err(LabError::config)?;
    if let Some(seed) = ov.seed {
        train_cfg.seeds = vec![seed];
    }
    let (train, test) = datasets::load(&cfg)?;
    train_cfg.augment.validate(train.image_shape())?;
    let out = cfg.output_dir(ov.out.as_deref());
    Ok(Prepared {
        cfg,
        train_cfg,
        train,
        test,
        out,
    })
}

/// Applies `--epochs` to a from-scratch run.
fn scratch_epochs(p: &mut Prepared, ov: &Overrides) -> LabResult<()> {
    if let Some(epochs) = ov.epochs {
        if epochs == 0 {
            return Err(LabError::config("--epochs must be at least 1"));
        }
        p.train_cfg.epochs = epochs;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> LabResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn build(p: &Prepared, act: ActivationSpec, seed: u64) -> LabResult<Model> {
    let specs = p
        .cfg
        .model_specs(act, p.train.classes())
        .map_err(LabError::config)?;
    Ok(Model::build(&specs, p.train.image_shape(), seed)?)
}

fn run_trial(p: &Prepared, act: ActivationSpec, seed: u64) -> LabResult<(TrialResult, Model)> {
    let mut model = build(p, act, seed)?;
    let start = Instant::now();
    let mut trial = train(&mut model, &p.train, &p.test, &p.train_cfg, seed)?;
    trial.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((trial, model))
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Trains one model per seed; writes a metrics CSV and a checkpoint per seed
/// and a summary CSV.
pub fn cmd_train(config: &Path, ov: &Overrides) -> LabResult<Vec<TrialResult>> {
    let mut p = prepare(config, ov)?;
    scratch_epochs(&mut p, ov)?;
    let act = p.cfg.activation();
    let name = p.cfg.model.activation.clone();
    // Surfaces layer/shape errors before the output directory exists.
    build(&p, act, p.train_cfg.seeds[0])?;
    create_dir(&p.out)?;
    let runs = run_ordered(ov.jobs.unwrap_or(1), &p.train_cfg.seeds, |&seed| {
        run_trial(&p, act, seed)
    });
    let mut trials = Vec::new();
    for run in runs {
        let (trial, mut model) = run?;
        let stem = format!("{name}-seed{}", trial.seed);
        metrics::write_trial(&p.out.join(format!("{stem}.csv")), &trial)?;
        model.round_to_f32();
        checkpoint::save(&model, &p.out.join(format!("{stem}.ckpt")))?;
        println!(
            "{stem}: peak test accuracy {}% over {} epochs ({:.1}s)",
            pct(trial.peak_test_acc),
            trial.epochs.len(),
            trial.wall_time_secs
        );
        trials.push(trial);
    }
    let summary = summarize_trials(&name, &trials)?;
    metrics::write_summary(&p.out.join("summary.csv"), &[summary])?;
    Ok(trials)
}

/// Result of a comparison: trials grouped by activation, in config order.
pub struct Comparison {
    pub activations: Vec<String>,
    pub trials: Vec<Vec<TrialResult>>,
    pub summaries: Vec<Summary>,
    /// Relative error decrease of each arm's best peak against the baseline's best peak.
    pub rel_error_decrease: Vec<Option<f64>>,
}

/// Paired-seed trials for every listed activation.
pub fn cmd_compare(config: &Path, ov: &Overrides) -> LabResult<Comparison> {
    let mut p = prepare(config, ov)?;
    scratch_epochs(&mut p, ov)?;
    let acts = p.cfg.compare_activations();
    if acts.len() < 2 {
        return Err(LabError::config(
            "compare.activations must list at least two activations",
        ));
    }
    for (_, act) in &acts {
        build(&p, *act, p.train_cfg.seeds[0])?;
    }
    create_dir(&p.out)?;
    let tasks: Vec<(usize, u64)> = (0..acts.len())
        .flat_map(|a| p.train_cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs = run_ordered(ov.jobs.unwrap_or(1), &tasks, |&(a, seed)| {
        run_trial(&p, acts[a].1, seed).map(|(t, _)| t)
    });
    let mut trials: Vec<Vec<TrialResult>> = vec![Vec::new(); acts.len()];
    for (&(a, _), run) in tasks.iter().zip(runs) {
        let trial = run?;
        metrics::write_trial(
            &p.out.join(format!("{}-seed{}.csv", acts[a].0, trial.seed)),
            &trial,
        )?;
        trials[a].push(trial);
    }
    let names: Vec<String> = acts.iter().map(|(n, _)| n.clone()).collect();
    let summaries = names
        .iter()
        .zip(&trials)
        .map(|(n, t)| summarize_trials(n, t))
        .collect::<Result<Vec<_>, _>>()?;
    metrics::write_summary(&p.out.join("summary.csv"), &summaries)?;

    let best = |t: &[TrialResult]| t.iter().map(|t| t.peak_test_acc).fold(f64::MIN, f64::max);
    let baseline = p
        .cfg
        .compare
        .baseline
        .as_ref()
        .and_then(|b| names.iter().position(|n| n == b))
        .unwrap_or(0);
    let base_best = best(&trials[baseline]);
    let red: Vec<Option<f64>> = (0..names.len())
        .map(|a| {
            if a == baseline {
                None
            } else {
                rel_error_decrease(base_best, best(&trials[a])).ok()
            }
        })
        .collect();

    let seeds = &p.train_cfg.seeds;
    let mut header: Vec<String> = vec!["activation".into()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    header.extend(["mean", "std_err", "best", "rel_error_decrease"].map(String::from));
    let rows: Vec<Vec<String>> = (0..names.len())
        .map(|a| {
            let mut row = vec![names[a].clone()];
            row.extend(trials[a].iter().map(|t| sig6(t.peak_test_acc)));
            row.push(sig6(summaries[a].mean_peak));
            row.push(summaries[a].std_err.map(sig6).unwrap_or_default());
            row.push(sig6(best(&trials[a])));
            row.push(red[a].map(sig6).unwrap_or_default());
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    metrics::write_table(&p.out.join("comparison.csv"), &header_refs, &rows)?;

    println!("peak test accuracy (%)");
    println!(
        "{:<10}{}",
        "seed",
        names.iter().map(|n| format!("{n:>10}")).collect::<String>()
    );
    for (i, s) in seeds.iter().enumerate() {
        let cells: String = trials
            .iter()
            .map(|t| format!("{:>10}", pct(t[i].peak_test_acc)))
            .collect();
        println!("{s:<10}{cells}");
    }
    let row = |label: &str, f: &dyn Fn(usize) -> String| {
        let cells: String = (0..names.len()).map(|a| format!("{:>10}", f(a))).collect();
        println!("{label:<10}{cells}");
    };
    row("mean", &|a| pct(summaries[a].mean_peak));
    row("std err", &|a| {
        summaries[a].std_err.map(pct).unwrap_or_else(|| "-".into())
    });
    row("rel.err.", &|a| {
        red[a].map(pct).unwrap_or_else(|| "-".into())
    });

    Ok(Comparison {
        activations: names,
        trials,
        summaries,
        rel_error_decrease: red,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub seed: u64,
    /// Accuracy of the loaded (and head-trained) ReLU model on the test split.
    pub before: f64,
    /// Accuracy right after substitution, before any update.
    pub epoch0: f64,
    /// Peak test accuracy over the fine-tuning epochs (`epoch0` if there were none).
    pub after: f64,
    pub rel_error_decrease: Option<f64>,
    pub trial: TrialResult,
}

/// Substitutes PVLU into a checkpointed ReLU model and fine-tunes it.
pub fn cmd_finetune(config: &Path, ckpt: &Path, ov: &Overrides) -> LabResult<FinetuneReport> {
    let mut p = prepare(config, ov)?;
    let seed = p.train_cfg.seeds[0];
    let mut model = checkpoint::load(ckpt, seed)?;
    if model.input_shape != p.train.image_shape() {
        return Err(LabError::config(format!(
            "checkpoint expects inputs {:?}, data has {:?}",
            model.input_shape,
            p.train.image_shape()
        )));
    }
    let mut ft_cfg = p.cfg.finetune_config().map_err(LabError::config)?;
    ft_cfg.seeds = vec![seed];
    if let Some(epochs) = ov.epochs {
        ft_cfg.epochs = epochs;
    }
    let f = p.cfg.finetune.clone();
    if f.gaussian_noise {
        p.train = datasets::blur(&p.train, f.sigma)?;
        p.test = datasets::blur(&p.test, f.sigma)?;
    }
    create_dir(&p.out)?;
    if f.head_epochs > 0 {
        let head_cfg = TrainConfig {
            epochs: f.head_epochs,
            freeze: p.cfg.final_layers(),
            ..ft_cfg.clone()
        };
        let head = train(&mut model, &p.train, &p.test, &head_cfg, seed)?;
        metrics::write_trial(&p.out.join(format!("head-seed{seed}.csv")), &head)?;
    }
    let (_, before) = evaluate(&model, &p.test, ft_cfg.eval_batch)?;
    let start = Instant::now();
    let (mut tuned, mut trial) = finetune(&model, &p.train, &p.test, &ft_cfg, seed)?;
    trial.wall_time_secs = start.elapsed().as_secs_f64();
    let epoch0 = trial.initial.map_or(before, |m| m.test_acc);
    let after = if trial.epochs.is_empty() {
        epoch0
    } else {
        trial.peak_test_acc
    };
    let red = rel_error_decrease(before, after).ok();
    metrics::write_trial(&p.out.join(format!("finetune-seed{seed}.csv")), &trial)?;
    metrics::write_table(
        &p.out.join("finetune-report.csv"),
        &["seed", "before", "epoch0", "after", "rel_error_decrease"],
        &[vec![
            seed.to_string(),
            sig6(before),
            sig6(epoch0),
            sig6(after),
            red.map(sig6).unwrap_or_default(),
        ]],
    )?;
    tuned.round_to_f32();
    checkpoint::save(&tuned, &p.out.join(format!("finetuned-seed{seed}.ckpt")))?;
    println!(
        "baseline {}%, after substitution {}%, after fine-tuning {}%, relative error decrease {}",
        pct(before),
        pct(epoch0),
        pct(after),
        red.map(|r| format!("{}%", pct(r)))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(FinetuneReport {
        seed,
        before,
        epoch0,
        after,
        rel_error_decrease: red,
        trial,
    })
}

/// Runs the finite-difference suite and prints one line per case.
pub fn cmd_gradcheck(seed: u64, points: usize, fault: Option<Fault>) -> LabResult<GradcheckReport> {
    let opts = GradcheckOptions {
        seed,
        points,
        fault,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    println!(
        "central differences, h = {:e}; tolerance {:e}; points within {:e} of a kink are excluded",
        opts.step, opts.tolerance, opts.kink_margin
    );
    for c in &report.cases {
        println!(
            "{:<40} {:>6} samples  max rel err {:.3e}  {}",
            c.name,
            c.samples,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} samples in {} cases",
        report.total_samples(),
        report.cases.len()
    );
    if !report.passed() {
        println!("failing: {}", report.failing().join(", "));
    }
    Ok(report)
}

/// Exit code for a gradient-check report.
pub fn gradcheck_exit(report: &GradcheckReport) -> u8 {
    if report.passed() {
        exit::OK
    } else {
        exit::VERIFICATION
    }
}

/// Plots the test-accuracy column of each trial CSV into one SVG.
pub fn cmd_plot(csvs: &[PathBuf], out: &Path) -> LabResult<()> {
    if csvs.is_empty() {
        return Err(LabError::config("plot needs at least one CSV"));
    }
    let series = csvs
        .iter()
        .map(|path| {
            Ok(Series {
                label: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string()),
                rows: metrics::read_trial(path)?,
            })
        })
        .collect::<LabResult<Vec<_>>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, plot::render(&series)).map_err(|e| LabError::io(out, e))
}

/// Writes small synthetic datasets and a matching config.
pub fn cmd_fixtures(out: &Path, seed: u64) -> LabResult<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> LabResult<()> {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (split, n, s, tag) in [
        (Split::Train, 200, seed, "train"),
        (Split::Test, 100, seed + 1, "test"),
    ] {
        let ds = synthetic::separable(n, 8, s, split)?;
        let (img, lab) = encode_idx(&ds)?;
        write(&format!("separable-{tag}-images.idx"), &img)?;
        write(&format!("separable-{tag}-labels.idx"), &lab)?;
    }
    for (split, n, s, tag) in [
        (Split::Train, 20, seed, "train"),
        (Split::Test, 10, seed + 1, "test"),
    ] {
        write(
            &format!("tiny-cifar-{tag}.bin"),
            &encode_cifar(&synthetic::cifar_like(n, s, split)?)?,
        )?;
    }
    write("toy.toml", TOY_CONFIG.as_bytes())?;
    Ok(written)
}

const TOY_CONFIG: &str = r#"# Two-class blob images; trains in a few seconds.
[data]
format = "idx"
train_images = "separable-train-images.idx"
train_labels = "separable-train-labels.idx"
test_images = "separable-test-images.idx"
test_labels = "separable-test-labels.idx"

[model]
preset = "tiny-cnn"
activation = "relu"

[train]
epochs = 3
batch_size = 16
seeds = [0, 1]

[compare]
activations = ["relu", "pvlu"]

[finetune]
epochs = 2

[output]
dir = "out"
"#;
