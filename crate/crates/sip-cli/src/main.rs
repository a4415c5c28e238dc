//! Command-line interface: fixture generation, normalization statistics,
//! training, prediction, evaluation, the pooling sweep, the scaling
//! benchmark and parameter-count reporting.
//!
//! Exit codes: 0 ok, 1 usage, 2 data/config error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use sip_core::bench::{bench_scaling, BenchKind};
use sip_core::blocks::TemporalVariant;
use sip_core::data::{
    compute_norm_stats, gen_fixtures, load_checkpoint, load_manifest, read_norm_stats,
    save_checkpoint, write_norm_stats, Checkpoint, FixtureSpec, NormStats,
};
use sip_core::error::Error;
use sip_core::metrics::{evaluate, pooling_sweep};
use sip_core::model::{ModelConfig, NormScope};
use sip_core::par::ExecMode;
use sip_core::params::ParamGroup;
use sip_core::train::{predict_dataset, train, Dataset, TrainConfig};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sip", version, about = "Speech intelligibility prediction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset with planted labels.
    GenFixtures(GenFixturesArgs),
    /// Compute normalization statistics from one manifest split.
    Stats(StatsArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Predict over one split and emit a CSV of predictions.
    Predict(PredictArgs),
    /// Evaluate a checkpoint: RMSE and NCC over one split.
    Eval(EvalArgs),
    /// Train/evaluate one model per temporal pooling size.
    SweepPooling(SweepArgs),
    /// Measure forward wall-time scaling across sequence lengths.
    Bench(BenchArgs),
    /// Print trainable-parameter totals per model variant.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct GenFixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    train_samples: usize,
    #[arg(long, default_value_t = 32)]
    eval_samples: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 48)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    bands: usize,
    #[arg(long, default_value_t = false)]
    binaural: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// per-layer or global
    #[arg(long, default_value = "per-layer")]
    scope: String,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model config JSON; overrides the flags below when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "uni-mamba")]
    variant: String,
    #[arg(long, default_value_t = false)]
    binaural: bool,
    /// Temporal pooling size.
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
}

impl ModelArgs {
    fn build(&self) -> Result<ModelConfig, Error> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => {
                let variant: TemporalVariant = self.variant.parse()?;
                ModelConfig::desk(variant, self.binaural)
            }
        };
        if let Some(p) = self.pool {
            config.pool = p;
        }
        if let Some(s) = self.model_seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Clone)]
struct TrainOptArgs {
    /// Train config JSON; overrides the flags below when present.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_every: Option<usize>,
}

impl TrainOptArgs {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut tc = match &self.train_config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::desk(),
        };
        if let Some(v) = self.steps {
            tc.total_steps = v;
            tc.warmup_steps = tc.warmup_steps.min(v.saturating_sub(1));
        }
        if let Some(v) = self.batch {
            tc.batch_size = v;
        }
        if let Some(v) = self.lr {
            tc.lr = v;
        }
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.val_every {
            tc.val_every = v;
        }
        tc.validate()?;
        Ok(tc)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: TrainOptArgs,
    /// Normalization stats file; computed from the train split if absent.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write loss/validation history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    save_optimizer: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output report JSON; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: TrainOptArgs,
    /// Comma-separated pooling sizes.
    #[arg(long, default_value = "20,10,5", value_delimiter = ',')]
    pools: Vec<usize>,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated kinds: self-attention, mamba-scan, mamba-stepwise.
    #[arg(long, default_value = "self-attention,mamba-scan,mamba-stepwise", value_delimiter = ',')]
    kinds: Vec<String>,
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "256,512,1024,2048,4096,8192", value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 384)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamCountArgs {
    /// One variant; all when absent.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = false, conflicts_with = "binaural")]
    mono: bool,
    #[arg(long, default_value_t = false)]
    binaural: bool,
}

fn load_stats(path: &Option<PathBuf>) -> Result<Option<NormStats>, Error> {
    path.as_ref().map(|p| read_norm_stats(p)).transpose()
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn count_of(config: &ModelConfig) -> Result<usize, Error> {
    use sip_core::model::SipModelParams;
    Ok(SipModelParams::<f32>::init(config)?.param_count())
}

fn print_count(variant: TemporalVariant, binaural: bool) -> Result<(), Error> {
    let config = if binaural {
        ModelConfig::published_binaural(variant)
    } else {
        ModelConfig::published_mono(variant)
    };
    let count = count_of(&config)?;
    println!(
        "{:<12} {:<20} {:>11} params  {:.2} M",
        if binaural { "binaural" } else { "mono" },
        variant.name(),
        count,
        count as f64 / 1e6
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenFixtures(a) => {
            let spec = FixtureSpec {
                train_samples: a.train_samples,
                eval_samples: a.eval_samples,
                layers: a.layers,
                frames: a.frames,
                dim: a.dim,
                audiogram_bands: a.bands,
                binaural: a.binaural,
            };
            let (manifest, _) = gen_fixtures(&a.out, a.seed, &spec)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Stats(a) => {
            let scope = match a.scope.as_str() {
                "per-layer" => NormScope::PerLayer,
                "global" => NormScope::Global,
                other => {
                    return Err(Error::Config(format!(
                        "unknown stats scope {other:?}; expected per-layer or global"
                    )))
                }
            };
            let entries = load_manifest(&a.manifest)?;
            let subset: Vec<_> = entries
                .into_iter()
                .filter(|e| e.split == a.split)
                .collect();
            let stats = compute_norm_stats(&a.manifest, &subset, scope, &a.split)?;
            write_norm_stats(&a.out, &stats)?;
            println!(
                "wrote {} ({} layers x {} dims from split {:?})",
                a.out.display(),
                stats.layers,
                stats.dim,
                a.split
            );
            Ok(())
        }
        Command::Train(a) => {
            let config = a.model.build()?;
            let tc = a.opt.build()?;
            let entries = load_manifest(&a.manifest)?;
            let stats = match load_stats(&a.stats)? {
                Some(s) => s,
                None => {
                    let subset: Vec<_> =
                        entries.iter().filter(|e| e.split == "train").cloned().collect();
                    compute_norm_stats(&a.manifest, &subset, config.norm_scope, "train")?
                }
            };
            let train_set = Dataset::load(&a.manifest, &entries, "train", Some(&stats), &config)?;
            let val_set = Dataset::load(&a.manifest, &entries, "eval", Some(&stats), &config)?;
            let outcome = train(&config, &tc, &train_set, &val_set)?;
            let mut ckpt = Checkpoint::from_params(&config, &outcome.best_params);
            if a.save_optimizer {
                let names: Vec<String> = outcome
                    .best_params
                    .params()
                    .iter()
                    .map(|(n, _)| n.clone())
                    .collect();
                ckpt.optimizer = Some(sip_core::data::OptimizerSnapshot {
                    step: outcome.optimizer.step,
                    first_moment: names
                        .iter()
                        .cloned()
                        .zip(outcome.optimizer.first_moment.clone())
                        .collect(),
                    second_moment: names
                        .iter()
                        .cloned()
                        .zip(outcome.optimizer.second_moment.clone())
                        .collect(),
                });
            }
            save_checkpoint(&a.out, &ckpt)?;
            if let Some(history_path) = &a.history {
                let text = serde_json::to_string_pretty(&outcome.history)
                    .map_err(|e| Error::Format(format!("history encode: {e}")))?;
                fs::write(history_path, text)
                    .map_err(|e| Error::io(history_path.display().to_string(), e))?;
            }
            println!(
                "wrote {} (best validation rmse {:.3} at step {})",
                a.out.display(),
                outcome.best_val_rmse,
                outcome.best_val_step
            );
            Ok(())
        }
        Command::Predict(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let stats = load_stats(&a.stats)?;
            let entries = load_manifest(&a.manifest)?;
            let dataset =
                Dataset::load(&a.manifest, &entries, &a.split, stats.as_ref(), &ckpt.config)?;
            if dataset.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "split {:?} has no samples",
                    a.split
                )));
            }
            let params = ckpt.build_params()?;
            let preds = predict_dataset(&ckpt.config, &params, &dataset, ExecMode::auto())?;
            let mut csv = String::from("id,prediction,label\n");
            for (sample, pred) in dataset.samples.iter().zip(&preds) {
                csv.push_str(&format!("{},{:.4},{:.4}\n", sample.id, pred, sample.label));
            }
            emit(&a.out, &csv)
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.checkpoint)?;
            let stats = load_stats(&a.stats)?;
            let report = evaluate(&ckpt, &a.manifest, &a.split, stats.as_ref())?;
            let text = report.to_json()?;
            emit(&a.out, &format!("{text}\n"))
        }
        Command::SweepPooling(a) => {
            let config = a.model.build()?;
            let tc = a.opt.build()?;
            let report = pooling_sweep(&config, &tc, &a.manifest, &a.pools)?;
            emit(&a.out, &report.to_csv())
        }
        Command::Bench(a) => {
            let kinds = a
                .kinds
                .iter()
                .map(|k| BenchKind::parse(k))
                .collect::<Result<Vec<_>, _>>()?;
            let reports = bench_scaling(&kinds, &a.lengths, a.dim, a.reps)?;
            let mut text = String::new();
            for r in &reports {
                text.push_str(&r.to_csv());
                match r.exponent {
                    Some(e) => text.push_str(&format!(
                        "# {} fitted growth exponent: {e:.3}\n",
                        r.kind.name()
                    )),
                    None => text.push_str(&format!(
                        "# {} fitted growth exponent: insufficient reliable points\n",
                        r.kind.name()
                    )),
                }
            }
            emit(&a.out, &text)
        }
        Command::ParamCount(a) => {
            match &a.variant {
                Some(name) => {
                    let variant: TemporalVariant = name.parse()?;
                    // Default to mono unless --binaural was given.
                    print_count(variant, a.binaural)?;
                }
                None => {
                    for variant in TemporalVariant::ALL {
                        if !a.binaural {
                            print_count(variant, false)?;
                        }
                    }
                    if !a.mono {
                        for variant in TemporalVariant::BINAURAL {
                            print_count(variant, true)?;
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                // clap would exit 2; usage failures are exit code 1 here.
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
