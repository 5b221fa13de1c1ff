//! `tus`: command-line entry point for corpus generation, user simulator
//! training, policy learning and the evaluation experiments.

mod commands;
mod config;
mod exit;
mod plot;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tus_core::experiments::{AblationVariant, PolicySchedule};
use tus_core::tus::TrainConfig;

use config::{Command, RunConfig, SplitPart, UserSpec};
use exit::ConfigError;
use rundir::{RunDir, CONFIG_FILE};

#[derive(Parser, Debug)]
#[command(name = "tus", version, about = "Transformer user simulator toolkit")]
struct Cli {
    /// Worker threads for simulation and training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write artifacts here instead of a new timestamped directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Base seed; required by every randomized subcommand.
    #[arg(long)]
    seed: Option<u64>,
    /// Ontology file (default: bundled toy ontology).
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Entity database file (default: bundled toy database).
    #[arg(long)]
    db: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// Fraction of dialogues held out for model selection.
    #[arg(long, default_value_t = 0.1)]
    dev: f64,
    /// Fraction of dialogues held out for testing.
    #[arg(long, default_value_t = 0.1)]
    test: f64,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// JSON file with the user simulator training config.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Overrides the number of supervised epochs.
    #[arg(long)]
    us_epochs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct PolicyArgs {
    /// JSON file with the policy schedule (PPO settings, evaluation size).
    #[arg(long)]
    policy_config: Option<PathBuf>,
    #[arg(long)]
    policy_epochs: Option<usize>,
    #[arg(long)]
    dialogues_per_epoch: Option<usize>,
    /// Evaluation dialogues per (policy, simulator) pair.
    #[arg(long)]
    n_eval: Option<usize>,
    /// Policies per simulator; seeds are `seed, seed+1, ...`.
    #[arg(long, default_value_t = 3)]
    n_seeds: usize,
}

#[derive(Subcommand, Debug)]
enum CliCommand {
    /// Write the ontology (the bundled toy one unless --ontology is given).
    MakeOntology {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a random entity database.
    MakeDb {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        entities_per_domain: usize,
    },
    /// Simulate agenda-user vs rule-system dialogues into a corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 2000)]
        n_dialogues: usize,
        #[arg(long, default_value_t = 0.05)]
        unsat_prob: f64,
        #[arg(long, default_value_t = 40)]
        max_turns: usize,
    },
    /// Train the transformer user simulator on a corpus.
    TrainUs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a trained simulator against corpus user turns.
    EvalUsCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        part: SplitPart,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Run a user simulator against the rule-based system.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// `abus` or `tus:<checkpoint>`.
        #[arg(long, default_value = "abus")]
        user: UserSpec,
        #[arg(long, default_value_t = 500)]
        n_dialogues: usize,
        #[arg(long, default_value_t = 40)]
        max_turns: usize,
    },
    /// Train a dialogue policy against one user simulator.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// `abus` or `tus:<checkpoint>`.
        #[arg(long, default_value = "abus")]
        user: UserSpec,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Train policies on each simulator and evaluate on all of them.
    CrossEval {
        #[command(flatten)]
        common: Common,
        /// Repeatable: `abus` or `tus:<checkpoint>`.
        #[arg(long = "simulator", required = true)]
        simulators: Vec<UserSpec>,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Leave-one-domain-out transfer of TUS-trained policies.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Repeatable; every domain when omitted.
        #[arg(long = "domain")]
        domains: Vec<String>,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Feature and loss ablation of the user simulator.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Repeatable: basic, index, domain-loss. All three when omitted.
        #[arg(long = "variant", value_parser = parse_variant)]
        variants: Vec<AblationVariant>,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write the per-turn feature matrices of one corpus dialogue.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialogue: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Play the system side against a trained simulator on stdin.
    Chat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw per-epoch curves of saved reports as SVG.
    PlotCurves {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Replay a saved run config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    serde_json::from_value(json!(s))
        .map_err(|_| format!("unknown variant {s:?}; expected basic, index or domain-loss"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf, what: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{what} {}: {e}", path.display())).into())
}

impl TrainArgs {
    fn apply(&self, config: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(p) = &self.train_config {
            config.train = read_json::<TrainConfig>(p, "training config")?;
        }
        if let Some(e) = self.us_epochs {
            config.train.epochs = e;
        }
        Ok(())
    }
}

impl PolicyArgs {
    fn apply(&self, config: &mut RunConfig) -> anyhow::Result<usize> {
        if let Some(p) = &self.policy_config {
            config.schedule = read_json::<PolicySchedule>(p, "policy schedule")?;
        }
        if let Some(e) = self.policy_epochs {
            config.schedule.ppo.epochs = e;
        }
        if let Some(n) = self.dialogues_per_epoch {
            config.schedule.ppo.dialogues_per_epoch = n;
        }
        if let Some(n) = self.n_eval {
            config.schedule.n_eval = n;
        }
        Ok(self.n_seeds)
    }
}

/// Builds the resolved config from flags.
fn config_from_flags(cmd: CliCommand) -> anyhow::Result<RunConfig> {
    let mut n_seeds = 1;
    let (common, mut config) = match cmd {
        CliCommand::Run { .. } => unreachable!("handled by the caller"),
        CliCommand::MakeOntology { common } => (common, RunConfig::new(Command::MakeOntology {})),
        CliCommand::MakeDb {
            common,
            entities_per_domain,
        } => (
            common,
            RunConfig::new(Command::MakeDb {
                entities_per_domain,
            }),
        ),
        CliCommand::GenCorpus {
            common,
            split,
            n_dialogues,
            unsat_prob,
            max_turns,
        } => {
            let mut c = RunConfig::new(Command::GenCorpus {
                n_dialogues,
                unsat_prob,
                max_turns,
            });
            c.split = config::SplitFractions {
                dev: split.dev,
                test: split.test,
            };
            (common, c)
        }
        CliCommand::TrainUs {
            common,
            corpus,
            split,
            train,
        } => {
            let mut c = RunConfig::new(Command::TrainUs {});
            c.corpus = Some(corpus);
            c.split = config::SplitFractions {
                dev: split.dev,
                test: split.test,
            };
            train.apply(&mut c)?;
            (common, c)
        }
        CliCommand::EvalUsCorpus {
            common,
            corpus,
            checkpoint,
            part,
            split,
        } => {
            let mut c = RunConfig::new(Command::EvalUsCorpus { checkpoint, part });
            c.corpus = Some(corpus);
            c.split = config::SplitFractions {
                dev: split.dev,
                test: split.test,
            };
            (common, c)
        }
        CliCommand::Simulate {
            common,
            user,
            n_dialogues,
            max_turns,
        } => (
            common,
            RunConfig::new(Command::Simulate {
                user,
                n_dialogues,
                max_turns,
            }),
        ),
        CliCommand::TrainPolicy {
            common,
            user,
            policy,
        } => {
            let mut c = RunConfig::new(Command::TrainPolicy { user });
            policy.apply(&mut c)?;
            (common, c)
        }
        CliCommand::CrossEval {
            common,
            simulators,
            policy,
        } => {
            let mut c = RunConfig::new(Command::CrossEval { simulators });
            n_seeds = policy.apply(&mut c)?;
            (common, c)
        }
        CliCommand::ZeroShot {
            common,
            corpus,
            domains,
            split,
            train,
            policy,
        } => {
            let mut c = RunConfig::new(Command::ZeroShot { domains });
            c.corpus = Some(corpus);
            c.split = config::SplitFractions {
                dev: split.dev,
                test: split.test,
            };
            train.apply(&mut c)?;
            n_seeds = policy.apply(&mut c)?;
            (common, c)
        }
        CliCommand::Ablation {
            common,
            corpus,
            variants,
            split,
            train,
        } => {
            let mut c = RunConfig::new(Command::Ablation { variants });
            c.corpus = Some(corpus);
            c.split = config::SplitFractions {
                dev: split.dev,
                test: split.test,
            };
            train.apply(&mut c)?;
            (common, c)
        }
        CliCommand::DumpFeatures {
            common,
            corpus,
            dialogue,
            train,
        } => {
            let mut c = RunConfig::new(Command::DumpFeatures { dialogue });
            c.corpus = Some(corpus);
            train.apply(&mut c)?;
            (common, c)
        }
        CliCommand::Chat { common, checkpoint } => {
            (common, RunConfig::new(Command::Chat { checkpoint }))
        }
        CliCommand::PlotCurves { common, reports } => (
            common,
            RunConfig::new(Command::PlotCurves { inputs: reports }),
        ),
    };
    config.ontology = common.ontology;
    config.db = common.db;
    config.out_dir = common.out;
    if let Some(seed) = common.seed {
        config.apply_seed(seed, n_seeds.max(1));
    }
    config.absolutize()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let config = match cli.command {
        CliCommand::Run { config } => RunConfig::load(&config)
            .with_context(|| format!("loading run config {}", config.display()))?,
        other => config_from_flags(other)?,
    };
    config.validate()?;
    let dir = RunDir::create(
        &config.out_dir,
        cli.run_dir.as_deref(),
        config.command.name(),
    )?;
    dir.write_text(CONFIG_FILE, &config.to_json())?;
    dir.log(
        "start",
        json!({"command": config.command.name(), "seed": config.seed}),
    );
    match commands::execute(&config, &dir) {
        Ok(()) => {
            dir.log("done", json!({}));
            println!("{}", dir.path().display());
            Ok(())
        }
        Err(e) => {
            dir.log(
                "error",
                serde_json::to_value(exit::report(&e)).unwrap_or_default(),
            );
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            let report = exit::report(&e);
            eprintln!("{}", json!({ "error": report }));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
