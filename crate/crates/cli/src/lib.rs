//! Command-line front end: dataset generation, toy training, single-image
//! inference, dataset evaluation, parameter sweeps and FLOPs reports.
//!
//! Exit codes: 0 success, 1 runtime/I-O error, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use tinydrop_core::container::atomic_write;
use tinydrop_core::dataset;
use tinydrop_core::flops;
use tinydrop_core::model::train::{train_toy, TrainExample};
use tinydrop_core::model::{Model, PosMode};
use tinydrop_core::pipeline;
use tinydrop_core::policy::{ExitDecision, PolicyParams};
use tinydrop_core::report;
use tinydrop_core::{Error, Result};

/// Default seed when neither --seed nor TINYDROP_SEED is given.
const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "tinydrop",
    about = "Guided token-dropping inference for small vision transformers",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled toy dataset directory.
    GenData {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 200, value_parser = parse_positive_usize)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a toy model on a dataset directory and save its weights.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Weight file to write.
        #[arg(long)]
        out: PathBuf,
        /// Architecture preset.
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 10, value_parser = parse_positive_usize)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05, value_parser = parse_positive_f64)]
        lr: f64,
        /// Positional scheme for the trained model.
        #[arg(long, value_enum, default_value_t = PosModeArg::Absolute)]
        pos_mode: PosModeArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify one image through the guided-dropping pipeline.
    Infer {
        /// Single-tensor TDW1 image file.
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Write the saliency grid as CSV (deferred samples only).
        #[arg(long)]
        dump_saliency: Option<PathBuf>,
        /// Write the kept patch indices as a JSON array (deferred samples only).
        #[arg(long)]
        dump_selection: Option<PathBuf>,
        /// Write the prediction record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a dataset directory; writes <prefix>.jsonl and <prefix>.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 1, value_parser = parse_positive_usize)]
        workers: usize,
        /// Output path prefix for the two report files.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Evaluate a (τ, γ) grid; writes one aggregate CSV.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        /// Comma-separated τ values.
        #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9", value_parser = parse_tau_list)]
        tau: TauList,
        /// Comma-separated γ values.
        #[arg(long, default_value = "0.5", value_parser = parse_gamma_list)]
        gamma: GammaList,
        #[arg(long, default_value_t = 0.7, value_parser = parse_r_max)]
        r_max: f64,
        #[arg(long, default_value_t = 1, value_parser = parse_positive_usize)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic FLOPs account for a guidance/target pair.
    Flops {
        #[command(flatten)]
        models: ModelArgs,
        /// Kept patch tokens on the deferred path (defaults to all).
        #[arg(long)]
        kept: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Small mean-pool model used for exits and saliency.
    Guidance,
    /// Larger class-token model whose cost the pipeline reduces.
    Target,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PosModeArg {
    Absolute,
    RelativeBias,
}

impl From<PosModeArg> for PosMode {
    fn from(v: PosModeArg) -> Self {
        match v {
            PosModeArg::Absolute => PosMode::Absolute,
            PosModeArg::RelativeBias => PosMode::RelativeBias,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Guidance weight file (TDW1).
    #[arg(long)]
    pub guidance: PathBuf,
    /// Target weight file (TDW1).
    #[arg(long)]
    pub target: PathBuf,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Early-exit confidence threshold, in (0,1).
    #[arg(long, value_parser = parse_tau)]
    pub tau: f64,
    /// Curvature of the confidence-to-drop mapping, > 0.
    #[arg(long, default_value_t = 0.5, value_parser = parse_gamma)]
    pub gamma: f64,
    /// Maximum drop ratio, in [0,1).
    #[arg(long, default_value_t = 0.7, value_parser = parse_r_max)]
    pub r_max: f64,
}

impl PolicyArgs {
    fn params(&self) -> Result<PolicyParams> {
        PolicyParams::new(self.tau, self.gamma, self.r_max)
    }
}

#[derive(Debug, Clone)]
pub struct TauList(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct GammaList(pub Vec<f64>);

fn parse_tau(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("tau must be in (0,1), got {v}"))
    }
}

fn parse_gamma(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("gamma must be > 0, got {v}"))
    }
}

fn parse_r_max(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("r_max must be in [0,1), got {v}"))
    }
}

fn parse_positive_usize(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("'{s}' is not an integer"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("value must be >= 1".to_string())
    }
}

fn parse_positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("value must be >= 0, got {v}"))
    }
}

fn parse_tau_list(s: &str) -> std::result::Result<TauList, String> {
    let vals = s
        .split(',')
        .map(parse_tau)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if vals.is_empty() {
        return Err("empty tau list".into());
    }
    Ok(TauList(vals))
}

fn parse_gamma_list(s: &str) -> std::result::Result<GammaList, String> {
    let vals = s
        .split(',')
        .map(parse_gamma)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if vals.is_empty() {
        return Err("empty gamma list".into());
    }
    Ok(GammaList(vals))
}

/// --seed wins, then TINYDROP_SEED, then the built-in default.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("TINYDROP_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(DEFAULT_SEED)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, seed } => {
            let seed = resolve_seed(seed);
            let samples = dataset::generate_toy_dataset(count, seed);
            dataset::write_dataset_dir(&out, &samples)?;
            println!(
                "{}",
                serde_json::json!({ "command": "gen-data", "samples": count, "seed": seed })
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            preset,
            epochs,
            lr,
            pos_mode,
            seed,
        } => {
            let seed = resolve_seed(seed);
            let samples = dataset::load_dataset_dir(&data)?;
            let examples: Vec<TrainExample> = samples
                .into_iter()
                .map(|s| {
                    let label = s.label.ok_or_else(|| {
                        Error::Argument(format!("sample {} has no label; training needs labels", s.id))
                    })?;
                    Ok(TrainExample {
                        image: s.image,
                        label,
                    })
                })
                .collect::<Result<_>>()?;
            let mut config = match preset {
                Preset::Guidance => dataset::toy_guidance_config(),
                Preset::Target => dataset::toy_target_config(),
            };
            config.pos_mode = pos_mode.into();
            let model = Model::init(config, seed)?;
            let outcome = train_toy(model, &examples, epochs, lr, seed)?;
            outcome.model.save(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "train",
                    "train_accuracy": outcome.train_accuracy,
                    "final_loss": outcome.final_loss,
                    "epochs": epochs,
                    "seed": seed,
                })
            );
            Ok(())
        }
        Command::Infer {
            image,
            models,
            policy,
            dump_saliency,
            dump_selection,
            out,
        } => {
            let params = policy.params()?;
            let guidance = Model::load(&models.guidance)?;
            let target = Model::load(&models.target)?;
            let img = dataset::load_image(&image)?;
            let (result, detail) =
                pipeline::infer_one_detailed(&img, None, &guidance, &target, &params)?;
            if let Some(path) = dump_saliency {
                match &detail.saliency {
                    Some(map) => atomic_write(&path, map.to_csv().as_bytes())?,
                    None => eprintln!("early exit: no saliency map produced"),
                }
            }
            if let Some(path) = dump_selection {
                match &detail.selection {
                    Some(sel) => {
                        let json = serde_json::to_string(sel.indices())
                            .map_err(|e| Error::Format(e.to_string()))?;
                        atomic_write(&path, json.as_bytes())?
                    }
                    None => eprintln!("early exit: no token selection produced"),
                }
            }
            let record = serde_json::to_string(&result).map_err(|e| Error::Format(e.to_string()))?;
            match out {
                Some(path) => atomic_write(&path, format!("{record}\n").as_bytes())?,
                None => println!("{record}"),
            }
            Ok(())
        }
        Command::Eval {
            data,
            models,
            policy,
            workers,
            out_prefix,
        } => {
            let params = policy.params()?;
            let guidance = Model::load(&models.guidance)?;
            let target = Model::load(&models.target)?;
            let samples = dataset::load_dataset_dir(&data)?;
            let (summary, results) =
                pipeline::evaluate(&samples, &guidance, &target, &params, workers)?;
            let jsonl = report::results_jsonl(&results)?;
            let csv = report::summaries_csv(std::slice::from_ref(&summary));
            atomic_write(&with_suffix(&out_prefix, "jsonl"), jsonl.as_bytes())?;
            atomic_write(&with_suffix(&out_prefix, "csv"), csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::Sweep {
            data,
            models,
            tau,
            gamma,
            r_max,
            workers,
            out,
        } => {
            let guidance = Model::load(&models.guidance)?;
            let target = Model::load(&models.target)?;
            let samples = dataset::load_dataset_dir(&data)?;
            let summaries =
                pipeline::sweep(&samples, &guidance, &target, &tau.0, &gamma.0, r_max, workers)?;
            let csv = report::summaries_csv(&summaries);
            atomic_write(&out, csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::Flops { models, kept, out } => {
            let guidance = Model::load(&models.guidance)?;
            let target = Model::load(&models.target)?;
            let t = target.config.num_patches();
            let kept = kept.unwrap_or(t);
            if kept == 0 || kept > t {
                return Err(Error::Argument(format!(
                    "--kept must be in 1..={t}, got {kept}"
                )));
            }
            let exit_report = flops::pipeline_flops(
                &ExitDecision::Exit {
                    class_index: 0,
                    confidence: 1.0,
                },
                &guidance.config,
                &target.config,
            );
            let proceed_report = flops::pipeline_flops(
                &ExitDecision::Proceed {
                    confidence: 0.0,
                    drop_ratio: 1.0 - kept as f64 / t as f64,
                    kept_count: kept,
                },
                &guidance.config,
                &target.config,
            );
            let doc = serde_json::json!({
                "convention": "1 multiply-add = 2 FLOPs",
                "baseline_target_forward": flops::vit_forward_flops(&target.config, target.config.seq_len()),
                "exit": exit_report,
                "proceed_at_kept": kept,
                "proceed": proceed_report,
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
            match out {
                Some(path) => atomic_write(&path, format!("{text}\n").as_bytes())?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".to_string());
    name.push('.');
    name.push_str(ext);
    prefix.with_file_name(name)
}
