//! The declarative run configuration. Every run directory holds the
//! resolved config, and `tus run --config <file>` replays it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tus_core::experiments::{AblationVariant, PolicySchedule};
use tus_core::tus::TrainConfig;

use crate::exit::{ConfigError, UsageError};

pub const RUN_CONFIG_SCHEMA: &str = "runconfig/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    /// Base seed the randomized fields below were derived from.
    pub seed: Option<u64>,
    /// Ontology file; the bundled toy ontology when absent.
    pub ontology: Option<PathBuf>,
    /// Entity database; the bundled toy database when absent.
    pub db: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Parent of the timestamped run directory.
    pub out_dir: PathBuf,
    pub split: SplitFractions,
    pub train: TrainConfig,
    pub schedule: PolicySchedule,
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    MakeOntology {},
    MakeDb {
        entities_per_domain: usize,
    },
    GenCorpus {
        n_dialogues: usize,
        unsat_prob: f64,
        max_turns: usize,
    },
    TrainUs {},
    EvalUsCorpus {
        checkpoint: PathBuf,
        part: SplitPart,
    },
    Simulate {
        user: UserSpec,
        n_dialogues: usize,
        max_turns: usize,
    },
    TrainPolicy {
        user: UserSpec,
    },
    CrossEval {
        simulators: Vec<UserSpec>,
    },
    ZeroShot {
        /// Domains to hold out; every ontology domain when empty.
        domains: Vec<String>,
    },
    Ablation {
        variants: Vec<AblationVariant>,
    },
    DumpFeatures {
        dialogue: String,
    },
    Chat {
        checkpoint: PathBuf,
    },
    PlotCurves {
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MakeOntology {} => "make-ontology",
            Self::MakeDb { .. } => "make-db",
            Self::GenCorpus { .. } => "gen-corpus",
            Self::TrainUs {} => "train-us",
            Self::EvalUsCorpus { .. } => "eval-us-corpus",
            Self::Simulate { .. } => "simulate",
            Self::TrainPolicy { .. } => "train-policy",
            Self::CrossEval { .. } => "cross-eval",
            Self::ZeroShot { .. } => "zero-shot",
            Self::Ablation { .. } => "ablation",
            Self::DumpFeatures { .. } => "dump-features",
            Self::Chat { .. } => "chat",
            Self::PlotCurves { .. } => "plot-curves",
        }
    }

    pub fn randomized(&self) -> bool {
        !matches!(
            self,
            Self::MakeOntology {}
                | Self::EvalUsCorpus { .. }
                | Self::DumpFeatures { .. }
                | Self::PlotCurves { .. }
        )
    }

    fn needs_corpus(&self) -> bool {
        matches!(
            self,
            Self::TrainUs {}
                | Self::EvalUsCorpus { .. }
                | Self::ZeroShot { .. }
                | Self::Ablation { .. }
                | Self::DumpFeatures { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    All,
    Train,
    Dev,
    Test,
}

/// A user simulator: `abus`, or `tus:<checkpoint>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum UserSpec {
    Abus,
    Tus(PathBuf),
}

impl UserSpec {
    /// Display name in reports: `abus`, or the checkpoint's file stem.
    pub fn name(&self) -> String {
        match self {
            Self::Abus => "abus".into(),
            Self::Tus(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "tus".into()),
        }
    }
}

impl TryFrom<String> for UserSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl std::str::FromStr for UserSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "abus" => Ok(Self::Abus),
            Some(("tus", path)) if !path.is_empty() => Ok(Self::Tus(PathBuf::from(path))),
            _ => Err(format!(
                "unknown user simulator {s:?}; expected `abus` or `tus:<checkpoint>`"
            )),
        }
    }
}

impl fmt::Display for UserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Abus => f.write_str("abus"),
            Self::Tus(path) => write!(f, "tus:{}", path.display()),
        }
    }
}

impl From<UserSpec> for String {
    fn from(u: UserSpec) -> String {
        u.to_string()
    }
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            schema: RUN_CONFIG_SCHEMA.to_string(),
            seed: None,
            ontology: None,
            db: None,
            corpus: None,
            out_dir: PathBuf::from("runs"),
            split: SplitFractions::default(),
            train: TrainConfig::default(),
            schedule: PolicySchedule::default(),
            command,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Derives every randomized field from `seed`. Only applied to configs
    /// built from flags; a loaded config is replayed as written.
    pub fn apply_seed(&mut self, seed: u64, n_seeds: usize) {
        self.seed = Some(seed);
        self.train.net.seed = seed;
        self.schedule.seeds = (0..n_seeds as u64).map(|i| seed + i).collect();
        self.schedule.ppo.seed = seed;
    }

    /// Rewrites input paths as absolute so the saved config can be replayed
    /// from any working directory.
    pub fn absolutize(&mut self) -> anyhow::Result<()> {
        let abs = |p: &mut PathBuf| -> anyhow::Result<()> {
            if p.is_relative() {
                *p = std::env::current_dir()?.join(&*p);
            }
            Ok(())
        };
        for p in [&mut self.ontology, &mut self.db, &mut self.corpus]
            .into_iter()
            .flatten()
        {
            abs(p)?;
        }
        abs(&mut self.out_dir)?;
        match &mut self.command {
            Command::EvalUsCorpus { checkpoint, .. } | Command::Chat { checkpoint } => {
                abs(checkpoint)?
            }
            Command::Simulate { user, .. } | Command::TrainPolicy { user } => {
                if let UserSpec::Tus(p) = user {
                    abs(p)?;
                }
            }
            Command::CrossEval { simulators } => {
                for s in simulators {
                    if let UserSpec::Tus(p) = s {
                        abs(p)?;
                    }
                }
            }
            Command::PlotCurves { inputs } => {
                for p in inputs {
                    abs(p)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema != RUN_CONFIG_SCHEMA {
            return Err(ConfigError(format!(
                "config schema {:?}, expected {RUN_CONFIG_SCHEMA:?}",
                self.schema
            ))
            .into());
        }
        if self.command.randomized() && self.seed.is_none() {
            return Err(UsageError(format!(
                "{} is randomized and requires --seed",
                self.command.name()
            ))
            .into());
        }
        if self.command.needs_corpus() && self.corpus.is_none() {
            return Err(UsageError(format!("{} requires --corpus", self.command.name())).into());
        }
        let SplitFractions { dev, test } = self.split;
        if !(dev >= 0.0 && test >= 0.0 && dev + test < 1.0) {
            return Err(ConfigError(format!(
                "split fractions dev={dev} test={test} leave no training data"
            ))
            .into());
        }
        if self.schedule.seeds.is_empty() {
            return Err(ConfigError("schedule.seeds is empty".into()).into());
        }
        match &self.command {
            Command::GenCorpus {
                unsat_prob,
                max_turns,
                ..
            } => {
                if !(0.0..=1.0).contains(unsat_prob) || *max_turns == 0 {
                    return Err(ConfigError(
                        "unsat_prob must lie in [0, 1] and max_turns be positive".into(),
                    )
                    .into());
                }
            }
            Command::CrossEval { simulators } if simulators.is_empty() => {
                return Err(UsageError("cross-eval needs at least one --simulator".into()).into());
            }
            Command::PlotCurves { inputs } if inputs.is_empty() => {
                return Err(UsageError("plot-curves needs at least one report".into()).into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::new(Command::TrainUs {})).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());

        let mut v = serde_json::to_value(RunConfig::new(Command::MakeDb {
            entities_per_domain: 3,
        }))
        .unwrap();
        v["command"]["make-db"]["colour"] = serde_json::json!("red");
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn config_round_trips() {
        let mut c = RunConfig::new(Command::CrossEval {
            simulators: vec![UserSpec::Abus, UserSpec::Tus("/x/tus.ckpt".into())],
        });
        c.apply_seed(4, 3);
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.schedule.seeds, vec![4, 5, 6]);
    }

    #[test]
    fn user_specs_parse() {
        assert_eq!("abus".parse::<UserSpec>().unwrap(), UserSpec::Abus);
        assert_eq!(
            "tus:a/b.ckpt".parse::<UserSpec>().unwrap(),
            UserSpec::Tus("a/b.ckpt".into())
        );
        assert!("tus:".parse::<UserSpec>().is_err());
        assert!("agenda".parse::<UserSpec>().is_err());
        assert_eq!(UserSpec::Tus("runs/x/tus.ckpt".into()).name(), "tus");
    }

    #[test]
    fn randomized_commands_need_a_seed() {
        let c = RunConfig::new(Command::GenCorpus {
            n_dialogues: 5,
            unsat_prob: 0.0,
            max_turns: 40,
        });
        assert!(c.validate().is_err());
        let mut c = c;
        c.apply_seed(1, 1);
        c.validate().unwrap();
    }
}
