//! Command-line interface. [`run`] is the testable entry point; it returns
//! the process exit code (0 success, 1 runtime failure, 2 usage or
//! configuration error).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::downstream::{dice_score, evaluate_protocol, EvalMode};
use crate::error::{Error, Result};
use crate::trainer::{model_from_checkpoint, run_pretraining, RESOLVED_CONFIG_FILE};
use crate::volio::{self, load_labels};

#[derive(Debug, Parser)]
#[command(name = "voxelpair", version, about = "Self-supervised voxel-wise representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write labelled synthetic volumes and a manifest.
    GenData(GenDataArgs),
    /// Run contrastive-restorative pretraining.
    Pretrain(PretrainArgs),
    /// Linear probe on a frozen backbone under k-fold cross-validation.
    LinearEval(EvalArgs),
    /// Fine-tune a pretrained backbone (or train from scratch) under k-fold
    /// cross-validation.
    Finetune(EvalArgs),
    /// Score a predicted label file against a reference label file.
    Dice(DiceArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Volume shape as `Z,Y,X`.
    #[arg(long, value_parser = parse_shape, default_value = "64,64,64")]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value`, may be repeated.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Disable local corruptions (shuffling and in-painting).
    #[arg(long)]
    pub no_aug: bool,
    /// Disable the restorative loss.
    #[arg(long)]
    pub no_recon: bool,
    /// Use the unbalanced reference architecture.
    #[arg(long)]
    pub no_arch: bool,
    /// Disable the contrastive loss.
    #[arg(long)]
    pub no_contrastive: bool,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        for (flag, key) in [
            (self.no_aug, "ablation.aug"),
            (self.no_recon, "ablation.restorative"),
            (self.no_arch, "ablation.arch"),
            (self.no_contrastive, "ablation.contrastive"),
        ] {
            if flag {
                o.push(format!("{key}=false"));
            }
        }
        RunConfig::from_file(&self.config, &o)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, conflicts_with = "from_scratch")]
    pub checkpoint: Option<PathBuf>,
    /// Train from random initialisation instead of loading a checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub classes: usize,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated sizes".to_string())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::ArchitectureMismatch(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

/// Caps the worker pool from `VOXELPAIR_THREADS` if set.
pub fn init_threads() {
    if let Some(n) = std::env::var("VOXELPAIR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let config_error = |e: Error| {
        eprintln!("error: {e}");
        2
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => match a.config.load() {
            Ok(cfg) => pretrain(&cfg, a.resume),
            Err(e) => return config_error(e),
        },
        Command::LinearEval(a) => match a.config.load() {
            Ok(cfg) => evaluate(&cfg, a, EvalMode::Linear),
            Err(e) => return config_error(e),
        },
        Command::Finetune(a) => match a.config.load() {
            Ok(cfg) => {
                let mode = if a.from_scratch {
                    EvalMode::Scratch
                } else {
                    EvalMode::Finetune
                };
                evaluate(&cfg, a, mode)
            }
            Err(e) => return config_error(e),
        },
        Command::Dice(a) => dice(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let m = volio::write_synthetic_dataset(&a.out, a.count, a.shape, a.classes, a.seed)?;
    println!(
        "wrote {} labelled volumes of shape {:?} with {} classes to {}",
        m.volumes.len(),
        a.shape,
        m.num_classes,
        a.out.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, resume: bool) -> Result<()> {
    let volumes = volio::load_images(&cfg.paths.data)?;
    let out = run_pretraining(cfg, &volumes, &cfg.paths.out, resume)?;
    match out.records.last() {
        Some(r) => println!(
            "step {}: L = {:.6} (L_c = {:.6}, L_r = {:.6})",
            r.step, r.loss.l_total, r.loss.l_c, r.loss.l_r
        ),
        None => println!("nothing to do: already at step {}", out.final_step),
    }
    println!("checkpoint: {}", out.checkpoint.display());
    println!("metrics: {}", out.metrics.display());
    Ok(())
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

fn evaluate(cfg: &RunConfig, a: &EvalArgs, mode: EvalMode) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(k) = a.folds {
        cfg.downstream.folds = k;
        cfg.validate()?;
    }
    let arch = cfg.model_config();
    let pretrained = match (&a.checkpoint, mode) {
        (Some(p), _) => Some(model_from_checkpoint(&checkpoint::load(p)?, &arch)?),
        (None, EvalMode::Scratch) => None,
        (None, EvalMode::Linear) => {
            return Err(Error::invalid("linear-eval needs --checkpoint"));
        }
        (None, EvalMode::Finetune) => {
            return Err(Error::invalid("finetune needs --checkpoint or --from-scratch"));
        }
    };
    let name = match mode {
        EvalMode::Linear => "linear_eval",
        EvalMode::Finetune => "finetune",
        EvalMode::Scratch => "scratch",
    };
    let data = volio::load_labeled(cfg.paths.labeled_dir())?;
    let out = cfg.paths.out.join(name);
    write_resolved(&cfg, &out)?;
    let res = evaluate_protocol(
        pretrained.as_ref(),
        &arch,
        mode,
        &data,
        &cfg.finetune,
        &cfg.downstream,
        cfg.seed,
        Some(&out.join("predictions")),
    )?;
    let path = out.join("results.json");
    fs::write(&path, serde_json::to_string_pretty(&res)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "{name}: overall Dice {:.4} +- {:.4} over {} folds",
        res.mean, res.std, res.k_folds
    );
    println!("results: {}", path.display());
    Ok(())
}

fn dice(a: &DiceArgs) -> Result<()> {
    let (p, _) = load_labels(&a.pred)?;
    let (t, _) = load_labels(&a.truth)?;
    let r = dice_score(&p, &t, a.classes)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
