//! Subcommands of the `cvib` binary. Settings come from flags, then the
//! config file, then built-in defaults.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{generate_synthetic, load_jsonl, save_jsonl, Dataset, SyntheticSpec, Vocabulary};
use crate::error::{CvibError, Result};
use crate::eval::{evaluate, per_class_report, pruning_report, robustness_report};
use crate::gradcheck::{grad_check_all, GradCheckReport};
use crate::trainer::{inference_model, train, Checkpoint, TrainData, TrainMode};
use crate::vib::{kl_oracle_suite, KlOracleSuite};

/// Environment variable holding the log filter, e.g. `CVIB_LOG=debug`.
pub const LOG_ENV: &str = "CVIB_LOG";

pub const TRAIN_FILE: &str = "train.jsonl";
pub const IID_FILE: &str = "iid_test.jsonl";
pub const OOD_FILE: &str = "ood_test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "cvib", version, about = "Contrastive VIB training for aspect sentiment classification")]
pub struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (train, iid test, ood test) and its manifest.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus a per-epoch log.
    Train(TrainArgs),
    /// Metrics for one dataset, or robustness drops between two.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Retained mask dimensions and alpha histograms of a checkpoint.
    PruneReport(PruneArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Regenerate from an existing manifest instead of the config.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub spurious_correlation: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Dataset used to pick the best checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// full_cvib, no_vib, no_scl or baseline.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub mask_learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One dataset, or an original and a perturbed dataset.
    #[arg(required = true, num_args = 1..=2)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_class_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Debug aid: perturb one analytic coordinate so the check must fail.
    #[arg(long)]
    pub corrupt: bool,
    /// Random instances for the KL infimum identity.
    #[arg(long, default_value_t = 100)]
    pub kl_instances: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record of how a corpus was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub files: Vec<String>,
    pub sizes: Vec<usize>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CvibError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CvibError::io(path, e))
}

fn emit(json: String, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_file(p, &json),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{json}").map_err(|e| CvibError::io("<stdout>", e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    RunConfig::load_or_default(cli.config.as_deref())
}

/// Parses arguments and runs the selected command.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a),
        Command::PruneReport(a) => cmd_prune_report(&cfg, a),
    }
}

pub fn cmd_generate(cfg: &mut RunConfig, a: &GenerateArgs) -> Result<()> {
    if let Some(path) = &a.from_manifest {
        let text = fs::read_to_string(path).map_err(|e| CvibError::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        cfg.corpus = manifest.spec;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    if let Some(r) = a.spurious_correlation {
        cfg.corpus.spurious_correlation = r;
    }
    if let Some(n) = a.train_size {
        cfg.corpus.train_size = n;
    }
    if let Some(d) = &a.out_dir {
        cfg.paths.data_dir = d.clone();
    }
    cfg.validate()?;
    let corpus = generate_synthetic(&cfg.corpus)?;
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let splits = [(TRAIN_FILE, &corpus.train), (IID_FILE, &corpus.iid_test), (OOD_FILE, &corpus.ood_test)];
    for (name, ds) in splits {
        save_jsonl(ds, dir.join(name))?;
    }
    let manifest = Manifest {
        seed: cfg.corpus.seed,
        spec: cfg.corpus.clone(),
        files: splits.iter().map(|(n, _)| n.to_string()).collect(),
        sizes: splits.iter().map(|(_, d)| d.len()).collect(),
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    info!("wrote corpus to {}", dir.display());
    Ok(())
}

pub fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(m) = &a.mode {
        cfg.train.mode = m.parse::<TrainMode>()?;
    }
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.gamma = a.gamma.unwrap_or(t.gamma);
    t.beta = a.beta.unwrap_or(t.beta);
    t.temperature = a.temperature.unwrap_or(t.temperature);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.mask_learning_rate = a.mask_learning_rate.unwrap_or(t.mask_learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    if let Some(d) = &a.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &a.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    cfg.validate()?;

    let train_set = load_jsonl(cfg.paths.data_dir.join(TRAIN_FILE))?;
    let validation: Option<Dataset> = a.validation.as_ref().map(load_jsonl).transpose()?;
    let vocab = Vocabulary::from_datasets([&train_set]);
    cfg.encoder.vocab_size = vocab.len();
    let data = TrainData {
        train: &train_set,
        validation: validation.as_ref(),
        vocab: &vocab,
    };
    let outcome = train(&cfg.train, &cfg.encoder, &data)?;

    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    outcome.final_checkpoint.save(&out.join(FINAL_CHECKPOINT))?;
    outcome.best_checkpoint.save(&out.join(BEST_CHECKPOINT))?;
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    write_file(&out.join(TRAIN_LOG), &log)?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    info!("wrote checkpoints and log to {}", out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    cfg.validate()?;
    let threshold = a.threshold.unwrap_or(cfg.eval.prune_threshold);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let predictor = inference_model(&ckpt, threshold)?;
    let sets: Vec<Dataset> = a.datasets.iter().map(load_jsonl).collect::<Result<_>>()?;
    let json = match sets.as_slice() {
        [one] => serde_json::to_string_pretty(&evaluate(&predictor, one)?)?,
        [original, perturbed] => {
            serde_json::to_string_pretty(&robustness_report(&predictor, original, perturbed)?)?
        }
        _ => unreachable!("clap limits the dataset count"),
    };
    if let Some(csv) = a.per_class_csv.as_ref().or(cfg.eval.per_class_csv.as_ref()) {
        write_file(csv, &per_class_report(&predictor, &sets[0])?.to_csv())?;
    }
    emit(json, a.out.as_deref())
}

#[derive(Debug, Serialize)]
pub struct GradcheckOutput {
    pub losses: Vec<GradCheckReport>,
    pub kl_oracle: KlOracleSuite,
    pub passed: bool,
}

pub fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<()> {
    cfg.validate()?;
    let losses = grad_check_all(&cfg.gradcheck, a.corrupt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gradcheck.seed);
    let kl_oracle = kl_oracle_suite(a.kl_instances, 1e-6, &mut rng)?;
    let passed = losses.iter().all(|r| r.passed) && kl_oracle.passed;
    let out = GradcheckOutput {
        losses,
        kl_oracle,
        passed,
    };
    emit(serde_json::to_string_pretty(&out)?, a.out.as_deref())?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<String> = out
            .losses
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{} at {}[{}]", r.loss.name(), r.worst_tensor, r.worst_index))
            .collect();
        Err(CvibError::Validation(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn cmd_prune_report(cfg: &RunConfig, a: &PruneArgs) -> Result<()> {
    cfg.validate()?;
    let threshold = a.threshold.unwrap_or(cfg.eval.prune_threshold);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let report = pruning_report(&ckpt, threshold)?;
    emit(serde_json::to_string_pretty(&report)?, a.out.as_deref())
}
