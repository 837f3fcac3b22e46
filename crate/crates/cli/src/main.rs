use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use driftbench::compare::{compare, Direction};
use driftbench::config::{RunConfig, Split};
use driftbench::plot::{label_series, plot};
use driftbench::report::Summary;
use driftbench::{generate, resolve_threads, EmbeddingSource, THREADS_ENV};
use driftbench_core::learners::LearnerKind;

#[derive(Parser)]
#[command(name = "driftbench", version, about = "Online few-shot continual learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `world.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the evaluation episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Overrides `learner.name`.
    #[arg(long)]
    learner: Option<String>,
    /// Any config key, e.g. `--set world.noise_sigma=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut config = RunConfig::load_with_overrides(self.config.as_deref(), &self.sets)?;
        if let Some(seed) = self.seed {
            config.world.seed = seed;
        }
        if let Some(k) = self.episodes {
            config.episodes = k;
        }
        if let Some(name) = &self.learner {
            config.learner.name = name.parse::<LearnerKind>()?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write episodes of a split as DBENCH1 files plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configured split.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Supervised pretraining of the embedding used by base and lwf.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output params file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train the embedding of a prototype learner.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Output params file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a learner on the configured split.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
        /// Frozen embedding params file.
        #[arg(long, conflicts_with_all = ["meta_train", "pretrain"])]
        params: Option<PathBuf>,
        /// Meta-train the embedding first (prototype learners).
        #[arg(long)]
        meta_train: bool,
        /// Pretrain the embedding first (base, lwf).
        #[arg(long, conflicts_with = "meta_train")]
        pretrain: bool,
    },
    /// Charts from one or more summary.json files.
    Plot {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check `metric(a) <direction> metric(b)` beyond a pooled-std margin.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        metric: String,
        /// `<`, `>`, `lt` or `gt`.
        #[arg(long)]
        direction: String,
        /// In units of pooled standard deviation.
        #[arg(long, default_value_t = 0.5)]
        margin: f64,
    },
}

fn write_params(out: &Path, outcome: &driftbench_core::learners::train::TrainOutcome) -> anyhow::Result<()> {
    outcome
        .params
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let losses = &outcome.losses;
    let window = (losses.len() / 10).max(1);
    if losses.len() >= window {
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        eprintln!(
            "mean loss {:.4} (first {window} steps) -> {:.4} (last {window}) over {} steps",
            mean(&losses[..window]),
            mean(&losses[losses.len() - window..]),
            losses.len()
        );
    }
    println!("{}", out.display());
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Gen { common, out, split } => {
            let config = common.load()?;
            let manifest = generate(&config, split.unwrap_or(config.split), &out)?;
            println!("wrote {} episodes to {}", manifest.episodes.len(), out.display());
        }
        Command::Pretrain { common, out } => {
            let config = common.load()?;
            write_params(&out, &driftbench::pretrain_embedding(&config)?)?;
        }
        Command::MetaTrain { common, out } => {
            let config = common.load()?;
            if !config.learner.name.is_prototype() {
                bail!(
                    "{} uses a pretrained embedding; run `driftbench pretrain` instead",
                    config.learner.name
                );
            }
            write_params(&out, &driftbench::meta_train_embedding(&config)?)?;
        }
        Command::Run {
            common,
            out,
            threads,
            params,
            meta_train,
            pretrain,
        } => {
            let mut config = common.load()?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            let prototype = config.learner.name.is_prototype();
            if meta_train && !prototype {
                bail!("--meta-train applies to prototype learners; {} needs --pretrain", config.learner.name);
            }
            if pretrain && prototype {
                bail!("--pretrain applies to base and lwf; {} needs --meta-train", config.learner.name);
            }
            let source = match params {
                Some(p) => EmbeddingSource::File(p),
                None if meta_train || pretrain => EmbeddingSource::Train,
                None => {
                    let (cmd, flag) = if prototype {
                        ("meta-train", "--meta-train")
                    } else {
                        ("pretrain", "--pretrain")
                    };
                    bail!(
                        "{} needs an embedding: pass --params <file> (create one with `driftbench {cmd} --config <file> --learner {} --out <file>`) or {flag}",
                        config.learner.name,
                        config.learner.name
                    );
                }
            };
            let summary = driftbench::run(&config, &source, resolve_threads(threads))?;
            let fmt = |s: Option<driftbench_core::eval::Stat>| {
                s.map(|s| format!("{:.4} ± {:.4}", s.mean, s.std.unwrap_or(0.0)))
                    .unwrap_or_else(|| "undefined".into())
            };
            let f = match summary.f_avg {
                None => "not reported".to_string(),
                Some(s) => fmt(s),
            };
            println!(
                "{}: O_avg {}  F_avg {}  -> {}",
                summary.learner,
                fmt(summary.o_avg),
                f,
                config.output_dir.join("summary.json").display()
            );
        }
        Command::Plot { summaries, out } => {
            let inputs = summaries
                .into_iter()
                .map(|p| Summary::load(&p).map(|s| (p, s)))
                .collect::<Result<Vec<_>, _>>()?;
            for path in plot(&label_series(inputs), &out)? {
                println!("{}", path.display());
            }
        }
        Command::Compare {
            a,
            b,
            metric,
            direction,
            margin,
        } => {
            let direction: Direction = direction.parse()?;
            let verdict = compare(&Summary::load(&a)?, &Summary::load(&b)?, &metric, direction, margin)?;
            println!("{verdict}");
            return Ok(verdict.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
