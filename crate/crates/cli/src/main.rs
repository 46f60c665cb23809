use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lair_core::data::{generate_dataset, load_dataset, select_split, write_dataset, GenerateSpec, Manifest};
use lair_core::explain::{explain, infer_video, SemanticBank};
use lair_core::model::LairModel;
use lair_core::train::{evaluate, run_ablation, train, EvalMode, Preset, TrainConfig};
use lair_core::{LairError, Result};

/// Language-guided interpretable action recognition on relation-token videos.
#[derive(Debug, Parser)]
#[command(name = "lair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic relation-transition dataset.
    GenData {
        /// Output directory.
        out: PathBuf,
        /// Generation spec (TOML); defaults are used without one.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write `model.ckpt` and `metrics.jsonl`.
    Train {
        data: PathBuf,
        out: PathBuf,
        /// Training config (TOML); defaults are used without one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and print the metrics as JSON.
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "video-only")]
        mode: EvalMode,
    },
    /// Explain the prediction for one video.
    Explain {
        checkpoint: PathBuf,
        data: PathBuf,
        video_id: String,
        /// Trace file (JSON); printed to stdout without it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG timeline of the selected tokens.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run an ablation suite and print a markdown comparison table.
    Ablate {
        /// table1 (token selection), table2 (learning scheme) or table3
        /// (scene-held-out folds).
        preset: Preset,
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("LAIR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| LairError::InvalidArgument(format!("LAIR_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LairError::NotFound(format!("{}: {e}", path.display())))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut c = match path {
        Some(p) => TrainConfig::from_toml(&read(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        c.seed = seed;
    }
    Ok(c)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, spec } => {
            let mut spec = match spec {
                Some(p) => GenerateSpec::from_toml(&read(&p)?)?,
                None => GenerateSpec::default(),
            };
            if let Some(seed) = seed_override()? {
                spec.world.seed = seed;
            }
            let data = generate_dataset(&spec.world, spec.n_videos, spec.split)?;
            write_dataset(&out, &data)?;
            println!("wrote {} videos to {}", data.samples.len(), out.display());
        }
        Command::Train { data, out, config } => {
            let config = train_config(config.as_deref())?;
            let (meta, samples) = load_dataset(&data)?;
            let manifest = Manifest::load(&data)?;
            let train_set = select_split(&samples, &manifest.split(&config.train_split)?)?;
            let eval_ids = manifest.split(&config.eval_split)?;
            let eval_set = select_split(&samples, &eval_ids)?;
            let eval_set = (!eval_set.is_empty()).then_some(eval_set.as_slice());
            let outcome = train(&config, &meta, &train_set, eval_set, Some(&out))?;
            if let Some(last) = outcome.history.last() {
                let acc = last.eval.as_ref().map_or("-".into(), |m| format!("{:.4}", m.accuracy));
                println!("trained {} epochs, final loss {:.4}, {} accuracy {acc}", last.epoch, last.loss.total, config.eval_split);
            }
            println!("checkpoint: {}", out.join("model.ckpt").display());
        }
        Command::Eval { checkpoint, data, split, mode } => {
            let (model, _) = LairModel::load(&checkpoint)?;
            let (_, samples) = load_dataset(&data)?;
            let manifest = Manifest::load(&data)?;
            let set = select_split(&samples, &manifest.split(&split)?)?;
            let report = evaluate(&model, &set, mode)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Explain { checkpoint, data, video_id, out, plot } => {
            let (model, _) = LairModel::load(&checkpoint)?;
            let (_, samples) = load_dataset(&data)?;
            let manifest = Manifest::load(&data)?;
            let sample = samples
                .iter()
                .find(|s| s.video_id == video_id)
                .ok_or_else(|| LairError::NotFound(format!("video '{video_id}' is not in {}", data.display())))?;
            let reference = select_split(&samples, &manifest.split("train")?)?;
            let bank = SemanticBank::build(&model, &reference)?;
            let trace = explain(&infer_video(&model, sample)?, &bank, &model)?;
            match out {
                Some(p) => {
                    trace.save(&p)?;
                    let names: Vec<&str> = trace.predicted.iter().map(|a| a.action.as_str()).collect();
                    println!("{}: {}", trace.video_id, names.join(", "));
                    for tr in &trace.transitions {
                        println!("  slot {} ({}): {}", tr.k, tr.object, tr.relations.join(" -> "));
                    }
                }
                None => println!("{}", trace.to_json()?),
            }
            if let Some(p) = plot {
                std::fs::write(&p, trace.to_svg())?;
            }
        }
        Command::Ablate { preset, data, config, seeds, json } => {
            let base = train_config(config.as_deref())?;
            let seeds = match seed_override()? {
                Some(s) if seeds.len() == 1 => vec![s],
                _ => seeds,
            };
            let (meta, samples) = load_dataset(&data)?;
            let manifest = Manifest::load(&data)?;
            let report = run_ablation(preset, &base, &meta, &samples, &manifest, &seeds)?;
            print!("{}", report.to_markdown());
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
