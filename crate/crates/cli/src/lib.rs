//! Command-line front end: dataset generation, training, evaluation,
//! one-shot scoring and the scoring service.

pub mod service;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use georef::checkpoint::Checkpoint;
use georef::config::RunConfig;
use georef::dataset::{read_jsonl, write_jsonl, SceneRecord};
use georef::evalkit::{evaluate_policy, EvalReport};
use georef::scoring::score_json;
use georef::structured_output::Task;
use georef::toy::{generate_instances, GenSpec, Instance, Profile, ToyPolicy, CATEGORIES};
use georef::train::{run_training, TrainSummary};

#[derive(Debug, Parser)]
#[command(name = "georef", version, about = "Verifiable-reward policy optimization for grounding tasks")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a policy from a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset with greedy decoding.
    Eval(EvalArgs),
    /// Score one request (JSON file or stdin) and print the breakdown.
    Score(ScoreArgs),
    /// Run the HTTP scoring service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Records per task, e.g. `rec=260,gres=26`.
    #[arg(long, default_value = "rec=260")]
    pub counts: String,
    #[arg(long, default_value_t = 2)]
    pub difficulty: u8,
    /// Scene distribution: `base` or `shifted`.
    #[arg(long, default_value = "base")]
    pub profile: String,
    /// Number of categories to cycle through.
    #[arg(long, default_value_t = CATEGORIES.len())]
    pub categories: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// IoU threshold; repeat for several.
    #[arg(long = "tau", default_values_t = vec![0.5, 0.7])]
    pub taus: Vec<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Request file; `-` or absent reads stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn parse_task(s: &str) -> Result<Task> {
    Ok(match s.trim() {
        "rec" => Task::Rec,
        "ovd" => Task::Ovd,
        "gres" => Task::Gres,
        other => bail!("unknown task {other:?} (expected rec, ovd or gres)"),
    })
}

/// Parses `rec=260,ovd=10` into per-task counts.
pub fn parse_counts(s: &str) -> Result<Vec<(Task, usize)>> {
    let mut out: Vec<(Task, usize)> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (task, n) = part.split_once('=').with_context(|| format!("expected task=count, got {part:?}"))?;
        let task = parse_task(task)?;
        let n: usize = n.trim().parse().with_context(|| format!("bad count in {part:?}"))?;
        if out.iter().any(|(t, _)| *t == task) {
            bail!("task {task} listed twice");
        }
        out.push((task, n));
    }
    Ok(out)
}

pub fn gen_data(args: &GenDataArgs, seed: u64) -> Result<usize> {
    let profile = match args.profile.as_str() {
        "base" => Profile::Base,
        "shifted" => Profile::Shifted,
        other => bail!("unknown profile {other:?}"),
    };
    let mut records = Vec::new();
    for (task, count) in parse_counts(&args.counts)? {
        let spec = GenSpec {
            seed,
            task,
            count,
            difficulty: args.difficulty,
            profile,
            categories: args.categories,
            ..GenSpec::default()
        };
        records.extend(generate_instances(&spec).iter().map(SceneRecord::from_instance));
    }
    write_jsonl(&args.out, &records)?;
    Ok(records.len())
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<TrainSummary> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(run_training(&cfg, args.checkpoint.as_deref())?)
}

/// Loads a JSONL dataset as replayable toy instances.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    read_jsonl(path)?
        .iter()
        .map(|r| r.to_instance().map_err(Into::into))
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let policy = ToyPolicy::new(ckpt.params.clone(), ckpt.temperature)?;
    let instances = load_dataset(&args.dataset)?;
    if let Some(bad) = instances.iter().find(|i| i.example.query.task != ckpt.task) {
        bail!(
            "{}: record task {} does not match the checkpoint task {}",
            bad.id,
            bad.example.query.task,
            ckpt.task
        );
    }
    Ok(evaluate_policy(&policy, &instances, &args.taus)?)
}

fn write_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let n = gen_data(&args, cli.seed.unwrap_or(0))?;
            eprintln!("wrote {n} records to {}", args.out.display());
        }
        Command::Train(args) => write_json(None, &train(&args, cli.seed)?)?,
        Command::Eval(args) => write_json(args.out.as_deref(), &eval(&args)?)?,
        Command::Score(args) => {
            let mut body = Vec::new();
            match args.input.as_deref() {
                Some(p) if p != Path::new("-") => {
                    body = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                }
                _ => {
                    std::io::stdin().read_to_end(&mut body)?;
                }
            }
            match score_json(&body) {
                Ok(b) => write_json(None, &b)?,
                Err(e) => {
                    write_json(
                        None,
                        &service::ErrorBody {
                            error: e.to_string(),
                            reason: e.reason(),
                        },
                    )?;
                    bail!("invalid request: {e}");
                }
            }
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(&args.host, args.port))?;
        }
    }
    Ok(())
}
