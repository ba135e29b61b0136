//! Command-line driver: synthetic dataset generation, training,
//! checkpoint evaluation and the repeated-split protocol.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! Logs go to stderr; machine-readable artifacts go to files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use nriqa::checkpoint::load_model;
use nriqa::config::{load_config, ModelConfig, VisualPromptMode};
use nriqa::data::{export_dataset, load_manifest, synthesize_dataset};
use nriqa::error::{Error, Result};
use nriqa::model::Model;
use nriqa::protocol::{
    cross_eval, evaluate, run_protocol, EvalReport, ProtocolOptions, RepeatResult,
};
use nriqa::train::{train, LabelPolicy, TrainOptions};

#[derive(Parser)]
#[command(
    name = "nriqa",
    version,
    about = "Prompt-tuned no-reference image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic dataset (images + CSV manifest).
    GenData(GenDataArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Repeated random-split training/evaluation with median metrics.
    Protocol(ProtocolArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of images.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for images/ and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

/// Config loading plus the ablation switches shared by train and protocol.
#[derive(Args, Clone)]
struct ModelFlags {
    /// Model config JSON; desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the scene prompt family and its loss.
    #[arg(long)]
    no_scene_prompts: bool,
    /// Disable the distortion prompt family and its loss.
    #[arg(long)]
    no_distortion_prompts: bool,
    /// Remove visual prompts entirely.
    #[arg(long, conflicts_with = "shallow_visual_prompts")]
    no_deep_visual_prompts: bool,
    /// Inject visual prompts at the first vision layer only.
    #[arg(long)]
    shallow_visual_prompts: bool,
    /// Plain L1 score regression instead of the smooth form.
    #[arg(long)]
    plain_l1: bool,
}

impl ModelFlags {
    fn build(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ModelConfig::desk(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_scene_prompts {
            cfg.scene_prompts = false;
        }
        if self.no_distortion_prompts {
            cfg.distortion_prompts = false;
        }
        if self.no_deep_visual_prompts {
            cfg.visual_prompt_mode = VisualPromptMode::Off;
        }
        if self.shallow_visual_prompts {
            cfg.visual_prompt_mode = VisualPromptMode::Shallow;
        }
        if self.plain_l1 {
            cfg.plain_l1 = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_label_policy(s: &str) -> std::result::Result<LabelPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ModelFlags,
    /// Training manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint/ and train.csv.
    #[arg(long)]
    out: PathBuf,
    /// Alignment label source: manifest, pseudo or off (default auto).
    #[arg(long, value_parser = parse_label_policy)]
    label_policy: Option<LabelPolicy>,
    /// After training, also evaluate on this manifest with no adaptation.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long, default_value = "eval_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ProtocolArgs {
    #[command(flatten)]
    flags: ModelFlags,
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    repeats: u64,
    /// Report JSON path.
    #[arg(long, default_value = "protocol_report.json")]
    out: PathBuf,
    /// Alignment label source: manifest, pseudo or off (default auto).
    #[arg(long, value_parser = parse_label_policy)]
    label_policy: Option<LabelPolicy>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Protocol(a) => cmd_protocol(a),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let ds = synthesize_dataset(a.n as usize, a.seed, a.image_size);
    let manifest = export_dataset(&ds, &a.out)?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.flags.build()?;
    let ds = load_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ckpt_dir = a.out.join("checkpoint");
    let opts = TrainOptions {
        label_policy: a.label_policy.unwrap_or_default(),
        checkpoint_dir: Some(ckpt_dir.clone()),
        log_path: Some(a.out.join("train.csv")),
        verbose: true,
    };
    let mut model: Model<f32> = Model::new(cfg)?;
    let report = train(&mut model, &ds, &opts)?;
    eprintln!(
        "best epoch {} (selection metric {:.4}), labels: {:?}",
        report.best_epoch, report.best_val_metric, report.label_source
    );
    println!("{}", ckpt_dir.display());
    if let Some(test_path) = &a.test_manifest {
        let test = load_manifest(test_path)?;
        let r = cross_eval(&model, &ds.name, &test, model.cfg.seed)?;
        println!("cross-dataset SRCC {:.6} PLCC {:.6}", r.srcc, r.plcc);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, counters, _) = load_model::<f32>(&a.checkpoint)?;
    let ds = load_manifest(&a.manifest)?;
    let (srcc, plcc) = evaluate(&model, &ds, a.seed)?;
    println!("SRCC {srcc:.6} PLCC {plcc:.6}");
    let report = EvalReport {
        dataset: ds.name.clone(),
        dataset_fingerprint: ds.fingerprint(),
        config_fingerprint: model.cfg.fingerprint(),
        base_seed: a.seed,
        repeats: 1,
        train_frac: 0.0,
        train_subsample: 1.0,
        per_repeat: vec![RepeatResult {
            seed: a.seed,
            srcc: Some(srcc),
            plcc: Some(plcc),
            error: None,
        }],
        median_srcc: Some(srcc),
        median_plcc: Some(plcc),
    };
    report.save(&a.out)?;
    eprintln!(
        "checkpoint from epoch {}, report at {}",
        counters.epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_protocol(a: ProtocolArgs) -> Result<()> {
    let cfg = a.flags.build()?;
    let ds = load_manifest(&a.manifest)?;
    let opts = ProtocolOptions {
        repeats: a.repeats as usize,
        base_seed: a.flags.seed.unwrap_or(cfg.seed),
        label_policy: a.label_policy.unwrap_or_default(),
        verbose: true,
        ..ProtocolOptions::default()
    };
    let report = run_protocol::<f32>(&cfg, &ds, &opts)?;
    report.save(&a.out)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    println!(
        "median SRCC {} median PLCC {}",
        fmt(report.median_srcc),
        fmt(report.median_plcc)
    );
    Ok(())
}
