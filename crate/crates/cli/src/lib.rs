//! Command-line driver: strict experiment configs, training, evaluation,
//! diagnostics, regime comparison and FLOP counts.

pub mod output;
pub mod spec;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ssat_core::data::Dataset;
use ssat_core::diag::{build_report, report_csvs};
use ssat_core::tensor::{DType, Float};
use ssat_core::train::{
    estimate_flops, evaluate, load_checkpoint, run_ssl_ft, run_with_init, save_checkpoint, ssl_ft_presets,
    EvalOptions, Init, Mode, Model, TrainConfig, Trainer,
};

use output::{metrics_csv, parse_metrics_csv, table_csv, write_json, write_text};
pub use spec::{parse_spec, parse_spec_str, ExperimentSpec, Overrides};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Parser)]
#[command(name = "ssat-forge", version, about = "Train and analyse vision transformers with a masked-reconstruction auxiliary task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long = "mask-ratio", global = true)]
    pub mask_ratio: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: ssat_core::Error| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    None,
    Lambda,
    Subset,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one regime; writes checkpoint.ckpt, metrics.csv and summary.json.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch; the checkpoint can be resumed later.
        #[arg(long = "until-epoch")]
        until_epoch: Option<usize>,
    },
    /// Test accuracy of a checkpoint, optionally under perspective warps.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Perspective strength in [0, 1].
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// Attention, token-distance, variance and Hessian diagnostics.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scratch, pretrain-then-finetune and joint training side by side.
    Compare {
        #[arg(long, value_enum, default_value = "none")]
        sweep: Sweep,
    },
    /// Analytic forward cost per image.
    Flops,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            mask_ratio: self.mask_ratio,
            mode: self.mode,
            epochs: self.epochs,
            out_dir: self.out.clone(),
        }
    }
}

/// Worker threads for evaluation, from `SSAT_THREADS` (default 1).
pub fn thread_budget() -> Result<usize> {
    match std::env::var("SSAT_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("SSAT_THREADS={v:?} is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let spec = parse_spec(cli.config.as_deref(), &cli.overrides())?;
    match &cli.command {
        Command::Flops => flops(&spec),
        command => match spec.train.dtype {
            DType::F32 => dispatch::<f32>(&spec, command),
            DType::F64 => dispatch::<f64>(&spec, command),
        },
    }
}

fn dispatch<T: Float>(spec: &ExperimentSpec, command: &Command) -> Result<()> {
    match command {
        Command::Train { resume, until_epoch } => train::<T>(spec, *resume, *until_epoch).map(|_| ()),
        Command::Eval { checkpoint, perturb } => eval::<T>(spec, checkpoint.as_deref(), *perturb).map(|_| ()),
        Command::Diagnose { checkpoint } => diagnose::<T>(spec, checkpoint.as_deref()),
        Command::Compare { sweep } => compare::<T>(spec, *sweep),
        Command::Flops => flops(spec),
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    spec_digest: String,
    config_digest: String,
    seed: u64,
    mode: Mode,
    epochs: usize,
    completed_epochs: usize,
    final_accuracy: Option<f64>,
    gmacs_per_image: f64,
    flops_per_image: u64,
    wall_seconds: f64,
    empty_mask_steps: usize,
    train_images: usize,
    test_images: usize,
    checkpoint: &'a Path,
}

fn pretrained<T: Float>(cfg: &TrainConfig) -> Result<ssat_core::train::Checkpoint<T>> {
    let path = cfg
        .init_checkpoint
        .as_ref()
        .context("train.init_checkpoint: required for finetune")?;
    Ok(load_checkpoint(path)?)
}

/// Trains per the spec, checkpointing after every epoch. Returns final accuracy.
pub fn train<T: Float>(spec: &ExperimentSpec, resume: bool, until_epoch: Option<usize>) -> Result<Option<f64>> {
    let start = Instant::now();
    let (train_set, test_set) = spec.load_data()?;
    let out = &spec.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join("metrics.csv");
    let aug = spec.augmentation();
    let pre;
    let (init, mut history) = if resume {
        let ck = load_checkpoint::<T>(&ck_path)?;
        let done = ck.epoch as usize;
        let rows = match fs::read_to_string(&metrics_path) {
            Ok(text) => parse_metrics_csv(&text)?,
            Err(_) => Vec::new(),
        };
        let rows: Vec<_> = rows.into_iter().filter(|m| m.epoch <= done).collect();
        (Init::Resume(ck), rows)
    } else if spec.train.mode == Mode::Finetune {
        pre = pretrained::<T>(&spec.train)?;
        (Init::Pretrained(&pre.params), Vec::new())
    } else {
        (Init::Fresh, Vec::new())
    };
    let mut trainer = Trainer::<T>::new(&spec.train, &spec.model, &aug, init)?;
    let digest = spec.digest();
    let stop = until_epoch.map_or(spec.train.epochs, |e| e.min(spec.train.epochs));
    while trainer.epoch < stop {
        let next = trainer.epoch + 1;
        trainer.run(&train_set, Some(&test_set), next)?;
        save_checkpoint(&ck_path, &trainer.checkpoint())?;
        history.extend(trainer.history.drain(..));
        write_text(&metrics_path, &metrics_csv(&digest, &history))?;
    }
    if history.is_empty() {
        write_text(&metrics_path, &metrics_csv(&digest, &history))?;
    }
    let flops = estimate_flops(&spec.model.encoder, &spec.model.decoder, spec.train.mode, spec.train.mask_ratio);
    let final_accuracy = history.last().and_then(|m| m.eval_acc);
    let summary = Summary {
        spec_digest: digest,
        config_digest: ssat_core::train::hex(&trainer.config_digest()),
        seed: spec.seed,
        mode: spec.train.mode,
        epochs: spec.train.epochs,
        completed_epochs: trainer.epoch,
        final_accuracy,
        gmacs_per_image: flops.macs as f64 / 1e9,
        flops_per_image: flops.flops,
        wall_seconds: start.elapsed().as_secs_f64(),
        empty_mask_steps: trainer.empty_mask_steps,
        train_images: train_set.len(),
        test_images: test_set.len(),
        checkpoint: &ck_path,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} {}/{} epochs: accuracy {}",
        spec.train.mode.name(),
        trainer.epoch,
        spec.train.epochs,
        final_accuracy.map_or("n/a".to_string(), |a| format!("{:.4}", a))
    );
    Ok(final_accuracy)
}

/// Rebuilds a model from a checkpoint; the decoder is present iff saved.
pub fn load_model<T: Float>(spec: &ExperimentSpec, path: &Path) -> Result<Model<T>> {
    let ck = load_checkpoint::<T>(path)?;
    let has_decoder = ck.params.iter().any(|p| p.name.starts_with("decoder."));
    let mut model = Model::<T>::init(&spec.model, has_decoder, spec.seed)?;
    model
        .load_values(&ck.params)
        .with_context(|| format!("{} does not fit the configured model", path.display()))?;
    Ok(model)
}

fn checkpoint_path(spec: &ExperimentSpec, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| spec.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

#[derive(Serialize)]
struct EvalRecord {
    spec_digest: String,
    checkpoint: PathBuf,
    perturb_strength: f64,
    perturb_seed: u64,
    accuracy: f64,
    test_images: usize,
}

pub fn eval<T: Float>(spec: &ExperimentSpec, checkpoint: Option<&Path>, perturb: Option<f64>) -> Result<f64> {
    let path = checkpoint_path(spec, checkpoint);
    let model = load_model::<T>(spec, &path)?;
    let (_, test_set) = spec.load_data()?;
    if let Some(s) = perturb {
        if !(0.0..=1.0).contains(&s) {
            bail!("--perturb {s} not in [0, 1]");
        }
    }
    let opts = EvalOptions {
        perturb: perturb.map(|s| (s, spec.seed)),
        threads: thread_budget()?,
        ..Default::default()
    };
    let accuracy = evaluate(&model, &test_set, &opts)?;
    fs::create_dir_all(&spec.out_dir)?;
    let strength = perturb.unwrap_or(0.0);
    let name = match perturb {
        Some(s) => format!("eval_perturb_{s}.json"),
        None => "eval.json".to_string(),
    };
    write_json(
        &spec.out_dir.join(name),
        &EvalRecord {
            spec_digest: spec.digest(),
            checkpoint: path,
            perturb_strength: strength,
            perturb_seed: spec.seed,
            accuracy,
            test_images: test_set.len(),
        },
    )?;
    println!("accuracy {accuracy:.4} (perspective strength {strength})");
    Ok(accuracy)
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    spec_digest: String,
    report: &'a ssat_core::diag::DiagnosticsReport,
}

pub fn diagnose<T: Float>(spec: &ExperimentSpec, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model::<T>(spec, &checkpoint_path(spec, checkpoint))?;
    let (_, test_set) = spec.load_data()?;
    let report = build_report(&model, &test_set, &spec.diagnostics.config())?;
    fs::create_dir_all(&spec.out_dir)?;
    let digest = spec.digest();
    write_json(
        &spec.out_dir.join("diagnostics.json"),
        &DiagnosticsFile {
            spec_digest: digest.clone(),
            report: &report,
        },
    )?;
    for (name, body) in report_csvs(&report) {
        write_text(&spec.out_dir.join(name), &format!("# config_digest={digest}\n{body}"))?;
    }
    println!("diagnostics for {} layers written to {}", report.attention.len(), spec.out_dir.display());
    Ok(())
}

fn accuracy_or_nan(a: Option<f64>) -> String {
    a.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

fn run_regime<T: Float>(spec: &ExperimentSpec, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<(Option<f64>, f64)> {
    let e = run_with_init::<T>(cfg, &spec.model, &spec.augmentation(), train, Some(test), Init::Fresh)?;
    Ok((e.metrics.final_accuracy, e.metrics.wall_seconds))
}

/// Every regime shares the run seed, so data order and augmentation draws match.
pub fn compare<T: Float>(spec: &ExperimentSpec, sweep: Sweep) -> Result<()> {
    let (train, test) = spec.load_data()?;
    fs::create_dir_all(&spec.out_dir)?;
    let digest = spec.digest();
    let enc = &spec.model.encoder;
    let dec = &spec.model.decoder;
    let ratio = spec.train.mask_ratio;
    let g = |mode| estimate_flops(enc, dec, mode, ratio).macs as f64 / 1e9;
    match sweep {
        Sweep::None => {
            let e = spec.train.epochs;
            let mut rows = Vec::new();
            let mut table = Vec::new();
            let scratch_cfg = TrainConfig { mode: Mode::Scratch, ..spec.train.clone() };
            let (acc, wall) = run_regime::<T>(spec, &scratch_cfg, &train, &test)?;
            rows.push(format!("scratch,{e},{},{:.4},{wall:.3}", accuracy_or_nan(acc), g(Mode::Scratch)));
            table.push(("scratch".to_string(), e.to_string(), acc, format!("{:.2}", g(Mode::Scratch)), wall));
            for preset in ssl_ft_presets(e) {
                let (pre, ft) = run_ssl_ft::<T>(&spec.train, &spec.model, &spec.augmentation(), &train, Some(&test), &preset)?;
                let epochs = format!("{}+{}", preset.ssl_epochs, preset.ft_epochs);
                let cost = format!("{:.4}+{:.4}", g(Mode::SslPretrain), g(Mode::Finetune));
                let wall = pre.wall_seconds + ft.wall_seconds;
                rows.push(format!(
                    "{},{epochs},{},{cost},{wall:.3}",
                    preset.name,
                    accuracy_or_nan(ft.final_accuracy)
                ));
                table.push((preset.name.clone(), epochs, ft.final_accuracy, cost, wall));
            }
            let ssat_cfg = TrainConfig { mode: Mode::Ssat, ..spec.train.clone() };
            let (acc, wall) = run_regime::<T>(spec, &ssat_cfg, &train, &test)?;
            rows.push(format!("ssat,{e},{},{:.4},{wall:.3}", accuracy_or_nan(acc), g(Mode::Ssat)));
            table.push(("ssat".to_string(), e.to_string(), acc, format!("{:.2}", g(Mode::Ssat)), wall));
            let csv = table_csv(&digest, "regime,epochs,accuracy,gflops_per_image,wall_seconds", &rows);
            write_text(&spec.out_dir.join("compare.csv"), &csv)?;
            println!("{:<10} {:>8} {:>9} {:>14} {:>10}", "regime", "epochs", "accuracy", "GFLOPs/image", "wall (s)");
            for (name, epochs, acc, cost, wall) in table {
                let acc = acc.map_or("n/a".to_string(), |a| format!("{:.4}", a));
                println!("{name:<10} {epochs:>8} {acc:>9} {cost:>14} {wall:>10.1}");
            }
        }
        Sweep::Lambda => {
            let mut rows = Vec::new();
            for &lambda in &spec.sweep.lambdas {
                let cfg = TrainConfig { mode: Mode::Ssat, lambda, ..spec.train.clone() };
                let (acc, _) = run_regime::<T>(spec, &cfg, &train, &test)?;
                println!("lambda {lambda}: accuracy {}", accuracy_or_nan(acc));
                rows.push(format!("{lambda},{}", accuracy_or_nan(acc)));
            }
            write_text(&spec.out_dir.join("lambda_sweep.csv"), &table_csv(&digest, "lambda,accuracy", &rows))?;
        }
        Sweep::Subset => {
            let mut rows = Vec::new();
            for &fraction in &spec.sweep.subsets {
                let part = if fraction < 1.0 { train.stratified_fraction(fraction, spec.seed)? } else { train.clone() };
                let mut accs = Vec::new();
                for mode in [Mode::Scratch, Mode::Ssat] {
                    let cfg = TrainConfig { mode, ..spec.train.clone() };
                    accs.push(run_regime::<T>(spec, &cfg, &part, &test)?.0);
                }
                println!(
                    "subset {fraction}: scratch {} ssat {}",
                    accuracy_or_nan(accs[0]),
                    accuracy_or_nan(accs[1])
                );
                rows.push(format!(
                    "{fraction},{},{},{}",
                    part.len(),
                    accuracy_or_nan(accs[0]),
                    accuracy_or_nan(accs[1])
                ));
            }
            let csv = table_csv(&digest, "fraction,train_images,scratch_accuracy,ssat_accuracy", &rows);
            write_text(&spec.out_dir.join("subset_sweep.csv"), &csv)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FlopsRow {
    mode: Mode,
    macs: u64,
    flops: u64,
    gmacs: f64,
}

pub fn flops(spec: &ExperimentSpec) -> Result<()> {
    let rows: Vec<FlopsRow> = [Mode::Scratch, Mode::SslPretrain, Mode::Ssat]
        .into_iter()
        .map(|mode| {
            let f = estimate_flops(&spec.model.encoder, &spec.model.decoder, mode, spec.train.mask_ratio);
            FlopsRow {
                mode,
                macs: f.macs,
                flops: f.flops,
                gmacs: f.macs as f64 / 1e9,
            }
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}
