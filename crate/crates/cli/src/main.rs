use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ofa::dataset::Method;
use ofa::env::render::BackgroundVariant;
use ofa_cli::commands::{eval_cmd, gen_demos, reproduce, train_cmd};
use ofa_cli::config::RunConfig;
use ofa_cli::experiment::Experiment;
use ofa_cli::{CliError, EXIT_OK};

#[derive(Parser)]
#[command(name = "ofa", version, about = "Object-focus dexterous manipulation: demonstrations, training, evaluation and experiment tables")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML); repeat to layer, later files win.
    #[arg(long = "config", global = true)]
    configs: Vec<PathBuf>,
    /// Override one configuration key, e.g. `--set policy.steps=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed; defaults to the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core); defaults to `experiment.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demonstrations in the dataset format.
    GenDemos {
        /// Task name; defaults to the configuration's `task`.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Skip writing camera frames; they are re-rendered from the recorded states on load.
        #[arg(long)]
        no_frames: bool,
    },
    /// Train one policy per arm on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// ofa, wo-rel, wo-of, wo-rel-of or act.
        #[arg(long, default_value = "ofa")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out trained policies and report the success rate.
    Eval {
        /// Directory holding policy_arm*.bin.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Placement offset x,y in metres.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, 0.0])]
        offset: Vec<f64>,
        /// plain, checker, textured-1 or textured-2.
        #[arg(long, default_value = "plain")]
        background: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate data, train and evaluate the full matrix for experiment tables.
    Reproduce {
        /// table1, fig5a, fig5b or table2; repeat or omit for all.
        #[arg(long = "experiment")]
        experiments: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.common.configs, &cli.common.overrides)?;
    if let Some(w) = cli.common.workers {
        cfg.experiment.workers = w;
    }
    let seed = cli.common.seed.unwrap_or(cfg.seed);
    cfg.seed = seed;
    match cli.command {
        Command::GenDemos { task, count, out, no_frames } => {
            let task = task.unwrap_or_else(|| cfg.task.clone());
            let index = gen_demos(&cfg, &task, count, seed, &out, !no_frames)?;
            println!("{} episodes, {} steps -> {}", index.episodes.len(), index.total_steps, out.display());
        }
        Command::Train { data, method, out } => {
            let method = Method::parse(&method)?;
            let m = train_cmd(&cfg, &data, method, seed, &out)?;
            println!("{} {}: {} samples, final loss {:?} -> {}", m.task, method.name(), m.samples.iter().sum::<usize>(), m.final_loss, out.display());
        }
        Command::Eval { params, task, episodes, offset, background, out } => {
            let task = task.unwrap_or_else(|| cfg.task.clone());
            let [x, y] = offset[..] else {
                return Err(CliError::config(format!("--offset takes two values x,y, got {}", offset.len())));
            };
            let bg = BackgroundVariant::parse(&background).ok_or_else(|| CliError::config(format!("unknown background `{background}`")))?;
            let s = eval_cmd(&cfg, &params, &task, episodes, [x, y], bg, seed, &out)?;
            let r = &s.summary;
            println!("{} {} {}: {}/{} ({:.0}%)", r.task, r.method, r.variant, r.successes, r.evals, 100.0 * r.rate);
        }
        Command::Reproduce { experiments, out } => {
            let list: Vec<Experiment> = if experiments.is_empty() {
                Experiment::ALL.to_vec()
            } else {
                experiments
                    .iter()
                    .map(|e| Experiment::parse(e).ok_or_else(|| CliError::config(format!("unknown experiment `{e}`"))))
                    .collect::<Result<_, _>>()?
            };
            reproduce(&cfg, &list, seed, &out)?;
            println!("report -> {}", out.join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
