//! Command-line driver: data preparation, training, evaluation, the
//! architecture comparison grid and the gradient-check gate.

mod fault;

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seiznet::data::{
    read_csv, relabel, split, synthetic_samples, write_csv, EegSample, PrepareOptions, Prepared, SplitData, SplitName,
    TaskSpec,
};
use seiznet::gradcheck::{run_cases, standard_cases};
use seiznet::metrics::{confusion, MetricsReport};
use seiznet::models::{build_model, Arch, ModelGraph};
use seiznet::persistence::{decode, encode, CheckpointMeta};
use seiznet::training::{evaluate, train, write_history, OptimizerKind, TrainConfig};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "seiznet", version, about = "1D residual CNN for EEG seizure classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relabel, split and write train/val/test CSVs with a task_label column.
    Prepare(PrepareArgs),
    /// Train one architecture and write checkpoint, history and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train every architecture for each seed and tabulate accuracies.
    Compare(CompareArgs),
    /// Finite-difference gradient checks of every layer kind and a reduced model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic UCI-format CSV with label-dependent rhythms.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// UCI epileptic seizure recognition CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Task 1..4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub task: u8,
    /// Shuffle and split without per-class stratification.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Hyper {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// adam or sgd_momentum.
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimizerKind,
    /// Momentum for sgd_momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Feed raw amplitudes instead of per-position standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
    /// Write measured epoch times into history.csv instead of 0.
    #[arg(long)]
    pub record_timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// resnet26, lenet1d or alexnet1d.
    #[arg(long, default_value = "resnet26")]
    pub arch: Arch,
    #[command(flatten)]
    pub hyper: Hyper,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, test, or all (every row of the file).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Refuse to run unless the checkpoint was trained for this task.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub task: Option<u8>,
    /// Output directory; defaults to eval-<split> beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Architectures to run, comma separated.
    #[arg(long, value_delimiter = ',', default_values = ["resnet26", "lenet1d", "alexnet1d"])]
    pub archs: Vec<Arch>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Replace the conv1d backward with a deliberately wrong one.
    #[arg(long, hide = true)]
    pub corrupt_conv: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// 2 when an input file is missing, 1 for every other failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let missing = err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|e| e.kind() == ErrorKind::NotFound)
            || matches!(c.downcast_ref::<seiznet::Error>(), Some(seiznet::Error::Io(e)) if e.kind() == ErrorKind::NotFound)
    });
    if missing {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Reproducibility envelope written as `manifest.json` next to the artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub data_file: String,
    pub data_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub engine_version: String,
    pub results: serde_json::Value,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&serde_json::to_value(self)?)?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

struct Input {
    path: PathBuf,
    samples: Vec<EegSample>,
    sha256: String,
}

fn read_input(path: &Path) -> Result<Input> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read data file {}", path.display()))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let samples = read_csv(bytes.as_slice(), path)?;
    Ok(Input {
        path: path.to_path_buf(),
        samples,
        sha256,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn check_artifacts(dir: &Path, names: &[String]) -> Result<()> {
    for name in names {
        match std::fs::metadata(dir.join(name)) {
            Ok(m) if m.len() > 0 => {}
            Ok(_) => bail!("artifact {name} is empty"),
            Err(e) => bail!("artifact {name} missing after write: {e}"),
        }
    }
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let input = read_input(&a.data.data)?;
    let task = TaskSpec::new(a.data.task)?;
    let opts = PrepareOptions {
        seed: a.seed,
        stratified: !a.data.no_stratify,
        standardize: false,
    };
    let p = Prepared::new(input.samples, task, opts)?;
    ensure_dir(&a.out)?;
    let mut artifacts = Vec::new();
    let mut splits = serde_json::Map::new();
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let file = format!("{}.csv", name.as_str());
        p.write_split(name, a.out.join(&file))?;
        let rows = p.assignment.get(name);
        let counts = p.dataset.class_counts(rows);
        println!("{:<5} {:>6} rows  per class {:?}", name.as_str(), rows.len(), counts);
        splits.insert(
            name.as_str().into(),
            serde_json::json!({ "rows": rows.len(), "class_counts": counts }),
        );
        artifacts.push(file);
    }
    artifacts.push("manifest.json".into());
    RunManifest {
        command: "prepare".into(),
        config: serde_json::json!({
            "task": task.id(),
            "seed": a.seed,
            "stratified": opts.stratified,
        }),
        data_file: input.path.display().to_string(),
        data_sha256: input.sha256,
        seed: a.seed,
        artifacts: artifacts.clone(),
        engine_version: ENGINE_VERSION.into(),
        results: serde_json::json!({ "class_names": task.class_names(), "splits": splits }),
    }
    .write(&a.out)?;
    check_artifacts(&a.out, &artifacts)
}

/// Everything that determines a training run, stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub stratified: bool,
    pub standardize: bool,
    pub data_sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

fn metrics_for(model: &ModelGraph<f32>, split: &SplitData, task: TaskSpec, name: &str) -> Result<MetricsReport> {
    let eval = evaluate(model, split)?;
    let cm = confusion(&split.labels, &eval.predictions, &task.class_names())?;
    Ok(MetricsReport::new(task.id(), name, eval.loss, cm))
}

fn train_run(input: &Input, data: &DataArgs, arch: Arch, hyper: &Hyper, seed: u64, out: &Path) -> Result<RunSummary> {
    let task = TaskSpec::new(data.task)?;
    let config = TrainConfig {
        arch,
        task: task.id(),
        epochs: hyper.epochs,
        batch_size: hyper.batch,
        optimizer: hyper.optimizer,
        learning_rate: hyper.lr,
        momentum: hyper.momentum,
        seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let run_config = RunConfig {
        train: config.clone(),
        stratified: !data.no_stratify,
        standardize: !hyper.no_standardize,
        data_sha256: input.sha256.clone(),
    };
    let opts = PrepareOptions {
        seed,
        stratified: run_config.stratified,
        standardize: run_config.standardize,
    };
    let p = Prepared::new(input.samples.clone(), task, opts)?;
    ensure_dir(out)?;
    println!(
        "{arch} task {} seed {seed}: {} train / {} val / {} test samples",
        task.id(),
        p.train.len(),
        p.val.len(),
        p.test.len()
    );

    let mut model = build_model::<f32>(arch, task.num_classes(), seed)?;
    let started = Instant::now();
    let outcome = train(&mut model, &p.train, &p.val, &config, |r| {
        println!(
            "epoch {:>3}/{} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4} ({:.1}s)",
            r.epoch, config.epochs, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.wall_time_seconds
        );
    })?;
    println!(
        "trained in {:.1}s; best epoch {}",
        started.elapsed().as_secs_f64(),
        outcome.best.epoch
    );
    model.set_state(&outcome.best.state)?;

    let train_acc = evaluate(&model, &p.train)?.accuracy;
    let val_acc = evaluate(&model, &p.val)?.accuracy;
    let report = metrics_for(&model, &p.test, task, "test")?;
    let summary = RunSummary {
        train_accuracy: train_acc,
        val_accuracy: val_acc,
        test_accuracy: report.accuracy,
        best_epoch: outcome.best.epoch,
    };
    println!(
        "accuracy train {:.4} val {:.4} test {:.4}",
        summary.train_accuracy, summary.val_accuracy, summary.test_accuracy
    );

    let meta = CheckpointMeta {
        arch,
        task: task.id(),
        num_classes: task.num_classes(),
        input_len: model.input_len(),
        seed,
        best_epoch: outcome.best.epoch,
        val_accuracy: outcome.best.val_accuracy,
        config: serde_json::to_value(&run_config)?,
    };
    let bytes = encode(&model, &p.standardizer, &meta)?;
    std::fs::write(out.join("checkpoint.bin"), &bytes)?;
    let reloaded = decode(&std::fs::read(out.join("checkpoint.bin"))?)?;
    if reloaded.model.state() != model.state() {
        bail!("checkpoint round-trip changed the weights");
    }

    let k = task.id();
    write_history(out.join("history.csv"), &outcome.history, hyper.record_timing)?;
    report.write_json(out.join(format!("metrics_task{k}.json")))?;
    report.confusion.write_csv(out.join(format!("confusion_task{k}.csv")))?;
    let artifacts = vec![
        "checkpoint.bin".to_string(),
        "history.csv".into(),
        format!("metrics_task{k}.json"),
        format!("confusion_task{k}.csv"),
        "manifest.json".into(),
    ];
    RunManifest {
        command: "train".into(),
        config: serde_json::json!({
            "run": run_config,
            "record_timing": hyper.record_timing,
        }),
        data_file: input.path.display().to_string(),
        data_sha256: input.sha256.clone(),
        seed,
        artifacts: artifacts.clone(),
        engine_version: ENGINE_VERSION.into(),
        results: serde_json::to_value(summary)?,
    }
    .write(out)?;
    check_artifacts(out, &artifacts)?;
    Ok(summary)
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunSummary> {
    let input = read_input(&a.data.data)?;
    train_run(&input, &a.data, a.arch, &a.hyper, a.seed, &a.out)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let bytes =
        std::fs::read(&a.checkpoint).with_context(|| format!("cannot read checkpoint {}", a.checkpoint.display()))?;
    let ck = decode(&bytes)?;
    if let Some(t) = a.task {
        if t != ck.meta.task {
            bail!(
                "checkpoint was trained for task {} but task {t} was requested",
                ck.meta.task
            );
        }
    }
    let run: RunConfig =
        serde_json::from_value(ck.meta.config.clone()).context("checkpoint does not carry a training configuration")?;
    let input = read_input(&a.data)?;
    if input.sha256 != run.data_sha256 {
        eprintln!("warning: data file differs from the one the checkpoint was trained on");
    }
    let task = TaskSpec::new(ck.meta.task)?;
    let dataset = relabel(input.samples.clone(), task);
    let rows: Vec<usize> = if a.split == "all" {
        (0..dataset.len()).collect()
    } else {
        let name: SplitName = a.split.parse()?;
        split(&dataset, ck.meta.seed, run.stratified)?.get(name).to_vec()
    };
    let data = SplitData::new(&dataset, &rows, &ck.standardizer);
    let report = metrics_for(&ck.model, &data, task, &a.split)?;
    println!(
        "{} accuracy {:.4} ({} samples)",
        a.split, report.accuracy, report.samples
    );

    let out = match &a.out {
        Some(dir) => dir.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", a.split)),
    };
    ensure_dir(&out)?;
    let k = task.id();
    report.write_json(out.join(format!("metrics_task{k}.json")))?;
    report.confusion.write_csv(out.join(format!("confusion_task{k}.csv")))?;
    let artifacts = vec![
        format!("metrics_task{k}.json"),
        format!("confusion_task{k}.csv"),
        "manifest.json".into(),
    ];
    RunManifest {
        command: "eval".into(),
        config: serde_json::json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "split": a.split,
            "run": run,
        }),
        data_file: input.path.display().to_string(),
        data_sha256: input.sha256,
        seed: ck.meta.seed,
        artifacts: artifacts.clone(),
        engine_version: ENGINE_VERSION.into(),
        results: serde_json::json!({ "accuracy": report.accuracy, "loss": report.loss }),
    }
    .write(&out)?;
    check_artifacts(&out, &artifacts)
}

pub const COMPARE_HEADER: &str = "arch,runs,failed,train_mean,train_min,train_max,test_mean,test_min,test_max";
pub const COMPARE_RUNS_HEADER: &str = "seed,arch,status,train_acc,val_acc,test_acc,best_epoch";

fn stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let input = read_input(&a.data.data)?;
    ensure_dir(&a.out)?;
    let mut runs: Vec<(u64, Arch, Result<RunSummary>)> = Vec::new();
    for &seed in &a.seeds {
        for &arch in &a.archs {
            let dir = a.out.join(format!("{arch}-seed{seed}"));
            let result = train_run(&input, &a.data, arch, &a.hyper, seed, &dir);
            if let Err(e) = &result {
                eprintln!("{arch} seed {seed} failed: {e:#}");
            }
            runs.push((seed, arch, result));
        }
    }

    let k = a.data.task;
    let mut per_run = format!("{COMPARE_RUNS_HEADER}\n");
    for (seed, arch, r) in &runs {
        match r {
            Ok(s) => per_run.push_str(&format!(
                "{seed},{arch},ok,{:.4},{:.4},{:.4},{}\n",
                s.train_accuracy, s.val_accuracy, s.test_accuracy, s.best_epoch
            )),
            Err(_) => per_run.push_str(&format!("{seed},{arch},failed,,,,\n")),
        }
    }
    let mut table = format!("{COMPARE_HEADER}\n");
    println!(
        "{:<10} {:>5} {:>22} {:>22}",
        "arch", "runs", "train mean [min, max]", "test mean [min, max]"
    );
    for &arch in &a.archs {
        let ok: Vec<&RunSummary> = runs
            .iter()
            .filter(|(_, x, _)| *x == arch)
            .filter_map(|(_, _, r)| r.as_ref().ok())
            .collect();
        let failed = runs.iter().filter(|(_, x, r)| *x == arch && r.is_err()).count();
        let tr = stats(&ok.iter().map(|s| s.train_accuracy).collect::<Vec<_>>());
        let te = stats(&ok.iter().map(|s| s.test_accuracy).collect::<Vec<_>>());
        table.push_str(&format!(
            "{arch},{},{failed},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            ok.len(),
            tr.0,
            tr.1,
            tr.2,
            te.0,
            te.1,
            te.2
        ));
        println!(
            "{:<10} {:>5} {:>8.2}% [{:.2}, {:.2}] {:>8.2}% [{:.2}, {:.2}]",
            arch.as_str(),
            ok.len(),
            100.0 * tr.0,
            100.0 * tr.1,
            100.0 * tr.2,
            100.0 * te.0,
            100.0 * te.1,
            100.0 * te.2
        );
    }
    let summary_file = format!("compare_task{k}.csv");
    let runs_file = format!("compare_task{k}_runs.csv");
    std::fs::write(a.out.join(&summary_file), table)?;
    std::fs::write(a.out.join(&runs_file), per_run)?;
    let mut artifacts = vec![summary_file, runs_file, "manifest.json".into()];
    for (seed, arch, r) in &runs {
        if r.is_ok() {
            artifacts.push(format!("{arch}-seed{seed}/checkpoint.bin"));
        }
    }
    RunManifest {
        command: "compare".into(),
        config: serde_json::json!({
            "task": k,
            "seeds": a.seeds,
            "archs": a.archs,
            "epochs": a.hyper.epochs,
            "batch_size": a.hyper.batch,
            "learning_rate": a.hyper.lr,
            "optimizer": a.hyper.optimizer,
            "stratified": !a.data.no_stratify,
            "standardize": !a.hyper.no_standardize,
        }),
        data_file: input.path.display().to_string(),
        data_sha256: input.sha256,
        seed: a.seeds[0],
        artifacts: artifacts.clone(),
        engine_version: ENGINE_VERSION.into(),
        results: serde_json::Value::Null,
    }
    .write(&a.out)?;
    check_artifacts(&a.out, &artifacts)?;
    let failures = runs.iter().filter(|(_, _, r)| r.is_err()).count();
    if failures > 0 {
        bail!("{failures} of {} runs failed", runs.len());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut cases = standard_cases(a.seed);
    if a.corrupt_conv {
        cases[0] = fault::corrupted_conv_case(a.seed);
    }
    let outcomes = run_cases(&cases);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} gradient checks passed", outcomes.len());
        Ok(())
    } else {
        bail!("gradient check failed for {}", failed.join(", "))
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.per_class == 0 {
        bail!("--per-class must be at least 1");
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_csv(&a.out, &synthetic_samples(a.per_class, a.seed))?;
    println!("wrote {} synthetic samples to {}", a.per_class * 5, a.out.display());
    Ok(())
}
