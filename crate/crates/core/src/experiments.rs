//! Experiment drivers: ablation, cross-model matrix, leave-one-domain-out
//! transfer and interaction statistics, plus their `report/1` envelopes.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{leave_one_out_split, Corpus, CorpusError, SplitSpec};
use crate::eval::{corpus_fit, CorpusFitReport};
use crate::nn::{Checkpoint, NetError};
use crate::rl::{
    evaluate_policy, train_policy, Decider, EvalReport, Policy, PolicyEnv, PolicyEpochLog,
    PpoConfig, RlError, UserFactory,
};
use crate::sim::{DialogueOutcome, SimError, UserSimulator};
use crate::tus::{
    model_from_checkpoint, train_supervised, EpochRecord, TrainConfig, TusAgent, TusError, TusModel,
};

pub const REPORT_SCHEMA: &str = "report/1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Tus(#[from] TusError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("experiment configuration error: {0}")]
    Config(String),
}

/// Versioned wrapper written around every report body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema: String,
    pub kind: String,
    pub body: T,
}

impl<T> Report<T> {
    pub fn new(kind: &str, body: T) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            kind: kind.to_string(),
            body,
        }
    }
}

/// Serializes flat records with a header row.
fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("flat record serializes to memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is UTF-8")
}

/// Mean and standard error of per-seed values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

impl SeedStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            per_seed: values.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Basic,
    Index,
    DomainLoss,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [Self::Basic, Self::Index, Self::DomainLoss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Basic => "basic",
            Self::Index => "+index",
            Self::DomainLoss => "+domain-loss",
        }
    }

    /// `base` with the variant's feature and loss switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        config.index_features = self != Self::Basic;
        config.net.domain_loss = self == Self::DomainLoss;
        config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub name: String,
    pub best_epoch: usize,
    /// Dev metrics of the selected epoch.
    pub dev: CorpusFitReport,
    /// Test metrics of the selected checkpoint.
    pub test: CorpusFitReport,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Relative first-turn length drop from basic to +index on the test set.
    pub fn len_drop(&self) -> Option<f64> {
        let basic = self.row(AblationVariant::Basic)?.test.len;
        let index = self.row(AblationVariant::Index)?.test.len;
        (basic > 0.0).then(|| (basic - index) / basic)
    }

    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            variant: &'a str,
            best_epoch: usize,
            precision: f64,
            recall: f64,
            f1: f64,
            turn_accuracy: f64,
            slot_accuracy: f64,
            len: f64,
            target_len: f64,
        }
        to_csv(self.rows.iter().map(|r| Row {
            variant: &r.name,
            best_epoch: r.best_epoch,
            precision: r.test.precision,
            recall: r.test.recall,
            f1: r.test.f1,
            turn_accuracy: r.test.turn_accuracy,
            slot_accuracy: r.test.slot_accuracy,
            len: r.test.len,
            target_len: r.test.target_len,
        }))
    }
}

/// Trains the three variants on the same split with the same seeds and
/// scores each selected checkpoint on the test dialogues. The selected
/// checkpoints are returned in `variants` order.
pub fn run_ablation(
    corpus: &Corpus,
    ontology: &Arc<crate::Ontology>,
    split: &SplitSpec,
    base: &TrainConfig,
    variants: &[AblationVariant],
    mut on_epoch: impl FnMut(AblationVariant, &EpochRecord),
) -> Result<(AblationReport, Vec<Checkpoint>), ExperimentError> {
    let train = corpus.subset(&split.train);
    let dev = corpus.subset(&split.dev);
    let test = corpus.subset(&split.test);
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for &variant in variants {
        let config = variant.apply(base);
        let (ckpt, report) =
            train_supervised(&train, &dev, ontology, &config, |r| on_epoch(variant, r))?;
        let eval_set = if test.is_empty() { &dev } else { &test };
        let (test_report, _) = corpus_fit(&ckpt.network, eval_set, ontology, config.window)?;
        rows.push(AblationRow {
            variant,
            name: variant.name().to_string(),
            best_epoch: report.best_epoch,
            dev: report.history[report.best_epoch].dev.clone(),
            test: test_report,
            history: report.history,
        });
        checkpoints.push(ckpt);
    }
    let report = AblationReport {
        n_train: train.len(),
        n_dev: dev.len(),
        n_test: test.len(),
        rows,
    };
    Ok((report, checkpoints))
}

// ---------------------------------------------------------------------------
// Policy runs shared by the cross-model and zero-shot drivers
// ---------------------------------------------------------------------------

/// A named user simulator factory.
pub struct Simulator<'a> {
    pub name: String,
    pub make: Box<UserFactory<'a>>,
}

impl<'a> Simulator<'a> {
    pub fn new(
        name: impl Into<String>,
        make: impl Fn() -> Box<dyn UserSimulator> + Sync + 'a,
    ) -> Self {
        Self {
            name: name.into(),
            make: Box::new(make),
        }
    }

    /// Fresh TUS agents backed by one shared model.
    pub fn tus(name: impl Into<String>, model: Arc<TusModel>) -> Simulator<'static> {
        Simulator::new(name, move || {
            Box::new(TusAgent::new(model.clone())) as Box<dyn UserSimulator>
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySchedule {
    /// PPO settings; `seed` is replaced by each entry of `seeds`.
    pub ppo: PpoConfig,
    pub seeds: Vec<u64>,
    /// Evaluation dialogues per (policy, simulator) pair.
    pub n_eval: usize,
    pub eval_seed: u64,
}

impl Default for PolicySchedule {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            seeds: vec![0, 1, 2],
            n_eval: 500,
            eval_seed: 0x0e7a1,
        }
    }
}

/// One trained policy and its greedy evaluations.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub curve: Vec<PolicyEpochLog>,
    pub policy: Option<Policy>,
    pub error: Option<String>,
    /// Evaluation simulator name → report.
    pub evals: BTreeMap<String, EvalReport>,
}

/// Trains one policy per seed against `trainer` and evaluates each greedily
/// against every simulator in `evaluators`. A failed training run is kept
/// with its error and no evaluations.
pub fn train_seeds(
    env: &PolicyEnv,
    trainer: &Simulator,
    evaluators: &[&Simulator],
    schedule: &PolicySchedule,
) -> Result<Vec<SeedRun>, ExperimentError> {
    use rayon::prelude::*;
    schedule
        .seeds
        .par_iter()
        .map(|&seed| {
            let config = PpoConfig {
                seed,
                ..schedule.ppo.clone()
            };
            let mut curve = Vec::new();
            let trained = train_policy(env, trainer.make.as_ref(), &config, |log, _| {
                curve.push(log.clone())
            });
            let policy = match trained {
                Ok((policy, _)) => policy,
                Err(e @ (RlError::EntropyCollapse { .. } | RlError::NonFinite { .. })) => {
                    return Ok(SeedRun {
                        seed,
                        curve,
                        policy: None,
                        error: Some(e.to_string()),
                        evals: BTreeMap::new(),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            let decider = Decider::Greedy(Arc::new(policy.clone()));
            let mut evals = BTreeMap::new();
            for sim in evaluators {
                let report = evaluate_policy(
                    env,
                    sim.make.as_ref(),
                    &decider,
                    schedule.n_eval,
                    schedule.eval_seed,
                )?;
                evals.insert(sim.name.clone(), report);
            }
            Ok(SeedRun {
                seed,
                curve,
                policy: Some(policy),
                error: None,
                evals,
            })
        })
        .collect()
}

fn success_stats(
    runs: &[SeedRun],
    eval: &str,
    filter: impl Fn(&crate::rl::EpisodeLog) -> bool,
) -> SeedStats {
    let rates: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.evals.get(eval))
        .map(|report| {
            let kept: Vec<_> = report.episodes.iter().filter(|e| filter(e)).collect();
            if kept.is_empty() {
                0.0
            } else {
                kept.iter().filter(|e| e.success).count() as f64 / kept.len() as f64
            }
        })
        .collect();
    SeedStats::from_values(&rates)
}

// ---------------------------------------------------------------------------
// Cross-model matrix
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossModelCell {
    pub train: String,
    pub eval: String,
    pub success: SeedStats,
    /// Evaluation dialogues per seed.
    pub n: usize,
    pub seeds: Vec<u64>,
    /// Set when at least one seed's training aborted; statistics then cover
    /// the remaining seeds.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train: String,
    pub seed: u64,
    pub epochs: Vec<PolicyEpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossModelMatrix {
    pub simulators: Vec<String>,
    pub cells: Vec<CrossModelCell>,
    /// Uniform random policy success against each simulator.
    pub random_baseline: BTreeMap<String, f64>,
    pub curves: Vec<TrainingCurve>,
}

impl CrossModelMatrix {
    /// Assembles the matrix from per-trainer seed runs, in `simulators` order.
    pub fn from_runs(
        simulators: &[String],
        runs: &[(String, Vec<SeedRun>)],
        schedule: &PolicySchedule,
        random_baseline: BTreeMap<String, f64>,
    ) -> Self {
        let mut cells = Vec::new();
        let mut curves = Vec::new();
        for (train, seed_runs) in runs {
            let errors: Vec<String> = seed_runs
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
                .collect();
            for eval in simulators {
                cells.push(CrossModelCell {
                    train: train.clone(),
                    eval: eval.clone(),
                    success: success_stats(seed_runs, eval, |_| true),
                    n: schedule.n_eval,
                    seeds: seed_runs.iter().map(|r| r.seed).collect(),
                    failed: (!errors.is_empty()).then(|| errors.join("; ")),
                });
            }
            for r in seed_runs {
                curves.push(TrainingCurve {
                    train: train.clone(),
                    seed: r.seed,
                    epochs: r.curve.clone(),
                });
            }
        }
        Self {
            simulators: simulators.to_vec(),
            cells,
            random_baseline,
            curves,
        }
    }

    pub fn cell(&self, train: &str, eval: &str) -> Option<&CrossModelCell> {
        self.cells
            .iter()
            .find(|c| c.train == train && c.eval == eval)
    }

    /// Success on `a` minus success on `b` for policies trained on `train`.
    pub fn gap(&self, train: &str, a: &str, b: &str) -> Option<f64> {
        Some(self.cell(train, a)?.success.mean - self.cell(train, b)?.success.mean)
    }

    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            train: &'a str,
            eval: &'a str,
            mean: f64,
            stderr: f64,
            n: usize,
            seeds: String,
            failed: bool,
        }
        to_csv(self.cells.iter().map(|c| {
            Row {
                train: &c.train,
                eval: &c.eval,
                mean: c.success.mean,
                stderr: c.success.stderr,
                n: c.n,
                seeds: c
                    .seeds
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
                failed: c.failed.is_some(),
            }
        }))
    }
}

/// Trains policies against every simulator and evaluates each against all
/// of them.
pub fn run_cross_model(
    env: &PolicyEnv,
    simulators: &[Simulator],
    schedule: &PolicySchedule,
) -> Result<CrossModelMatrix, ExperimentError> {
    if simulators.is_empty() {
        return Err(ExperimentError::Config(
            "cross-model evaluation needs a simulator".into(),
        ));
    }
    let evaluators: Vec<&Simulator> = simulators.iter().collect();
    let mut runs = Vec::new();
    for sim in simulators {
        runs.push((
            sim.name.clone(),
            train_seeds(env, sim, &evaluators, schedule)?,
        ));
    }
    let mut baseline = BTreeMap::new();
    for sim in simulators {
        let r = evaluate_policy(
            env,
            sim.make.as_ref(),
            &Decider::Random,
            schedule.n_eval,
            schedule.eval_seed,
        )?;
        baseline.insert(sim.name.clone(), r.success_rate);
    }
    let names: Vec<String> = simulators.iter().map(|s| s.name.clone()).collect();
    Ok(CrossModelMatrix::from_runs(
        &names, &runs, schedule, baseline,
    ))
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    /// `None` for the simulator trained on every domain.
    pub held_out: Option<String>,
    pub removed_fraction: f64,
    pub n_train_dialogues: usize,
    pub overall: SeedStats,
    /// Success restricted to evaluation goals containing each domain.
    pub per_domain: BTreeMap<String, SeedStats>,
    pub failed: Option<String>,
}

impl ZeroShotRow {
    pub fn from_runs(
        held_out: Option<String>,
        removed_fraction: f64,
        n_train_dialogues: usize,
        runs: &[SeedRun],
        eval: &str,
        domains: &[String],
    ) -> Self {
        let per_domain = domains
            .iter()
            .map(|d| {
                (
                    d.clone(),
                    success_stats(runs, eval, |e| e.domains.contains(d)),
                )
            })
            .collect();
        let errors: Vec<String> = runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        Self {
            held_out,
            removed_fraction,
            n_train_dialogues,
            overall: success_stats(runs, eval, |_| true),
            per_domain,
            failed: (!errors.is_empty()).then(|| errors.join("; ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// Simulator the policies were evaluated against.
    pub eval_simulator: String,
    pub seeds: Vec<u64>,
    pub full: ZeroShotRow,
    pub rows: Vec<ZeroShotRow>,
}

impl ZeroShotReport {
    /// Held-out-domain success of the leave-one-out policy minus that of the
    /// full policy on the same domain.
    pub fn held_out_gaps(&self) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter_map(|r| {
                let d = r.held_out.as_ref()?;
                let loo = r.per_domain.get(d)?.mean;
                let full = self.full.per_domain.get(d)?.mean;
                Some((d.clone(), loo - full))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            held_out: &'a str,
            removed_fraction: f64,
            domain: &'a str,
            mean: f64,
            stderr: f64,
        }
        let mut rows = Vec::new();
        for row in std::iter::once(&self.full).chain(&self.rows) {
            let held_out = row.held_out.as_deref().unwrap_or("none");
            let overall = std::iter::once(("all", &row.overall));
            for (domain, s) in overall.chain(row.per_domain.iter().map(|(d, s)| (d.as_str(), s))) {
                rows.push(Row {
                    held_out,
                    removed_fraction: row.removed_fraction,
                    domain,
                    mean: s.mean,
                    stderr: s.stderr,
                });
            }
        }
        to_csv(rows)
    }
}

/// Leave-one-domain-out transfer. For each domain, a TUS is trained on the
/// split without it, policies are trained against that TUS on goals over all
/// domains, and per-domain success is measured against `evaluator`.
///
/// `full` supplies the reference row's runs (trained against a TUS that saw
/// every domain, evaluated against `evaluator`); when absent the reference
/// is trained here from `split`.
#[allow(clippy::too_many_arguments)]
pub fn run_zero_shot(
    corpus: &Corpus,
    env: &PolicyEnv,
    split: &SplitSpec,
    train_config: &TrainConfig,
    schedule: &PolicySchedule,
    domains: &[String],
    evaluator: &Simulator,
    full: Option<Vec<SeedRun>>,
    mut on_progress: impl FnMut(&str),
) -> Result<ZeroShotReport, ExperimentError> {
    if env.ontology.domains.len() < 2 {
        return Err(ExperimentError::Config(
            "leave-one-domain-out needs at least two domains".into(),
        ));
    }
    let all_domains: Vec<String> = env
        .ontology
        .domains
        .iter()
        .map(|d| d.name.clone())
        .collect();
    let train_tus = |split: &SplitSpec| -> Result<Arc<TusModel>, ExperimentError> {
        let (ckpt, _) = train_supervised(
            &corpus.subset(&split.train),
            &corpus.subset(&split.dev),
            &env.ontology,
            train_config,
            |_| {},
        )?;
        Ok(Arc::new(model_from_checkpoint(&ckpt, env.ontology.clone())))
    };
    let full_runs = match full {
        Some(runs) => runs,
        None => {
            on_progress("full");
            let sim = Simulator::tus("tus", train_tus(split)?);
            train_seeds(env, &sim, &[evaluator], schedule)?
        }
    };
    let full_row = ZeroShotRow::from_runs(
        None,
        0.0,
        split.train.len(),
        &full_runs,
        &evaluator.name,
        &all_domains,
    );
    let mut rows = Vec::new();
    for domain in domains {
        on_progress(domain);
        let loo = leave_one_out_split(corpus, &env.ontology, split, domain)?;
        let sim = Simulator::tus(format!("tus-no-{domain}"), train_tus(&loo)?);
        let runs = train_seeds(env, &sim, &[evaluator], schedule)?;
        rows.push(ZeroShotRow::from_runs(
            Some(domain.clone()),
            loo.removed_fraction,
            loo.train.len(),
            &runs,
            &evaluator.name,
            &all_domains,
        ));
    }
    Ok(ZeroShotReport {
        eval_simulator: evaluator.name.clone(),
        seeds: schedule.seeds.clone(),
        full: full_row,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Interaction statistics
// ---------------------------------------------------------------------------

/// How a user simulator behaves against a system: success, dialogue length
/// and the mean number of slot acts per user turn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub n: usize,
    pub success_rate: f64,
    pub avg_turns: f64,
    pub first_turn_len: f64,
    pub length_curve: Vec<f64>,
}

impl BehaviorStats {
    pub fn from_outcomes(outcomes: &[DialogueOutcome]) -> Self {
        let n = outcomes.len();
        if n == 0 {
            return Self::default();
        }
        let mut sums: Vec<(usize, usize)> = Vec::new();
        for o in outcomes {
            for (t, turn) in o.dialogue.turns.iter().enumerate() {
                if sums.len() <= t {
                    sums.resize(t + 1, (0, 0));
                }
                sums[t].0 += 1;
                sums[t].1 += turn.user.iter().filter(|a| a.slot.is_some()).count();
            }
        }
        let curve: Vec<f64> = sums.iter().map(|&(c, s)| s as f64 / c as f64).collect();
        Self {
            n,
            success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / n as f64,
            avg_turns: outcomes.iter().map(|o| o.turns as f64).sum::<f64>() / n as f64,
            first_turn_len: curve.first().copied().unwrap_or(0.0),
            length_curve: curve,
        }
    }
}
