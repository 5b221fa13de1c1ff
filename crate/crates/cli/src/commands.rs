//! One function per subcommand. Each reads its inputs from the resolved
//! config and writes its artifacts into the run directory.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use tus_core::abus::AgendaUser;
use tus_core::corpus::{replay_dialogue, Corpus, CorpusStats, SplitSpec};
use tus_core::db::{sample_db_goal, EntityDb, DEFAULT_ENTITIES_PER_DOMAIN};
use tus_core::encoder::FeatureLayout;
use tus_core::eval::{corpus_fit, CorpusFitReport};
use tus_core::experiments::{
    run_ablation, run_cross_model, run_zero_shot, AblationVariant, BehaviorStats, Report, Simulator,
};
use tus_core::nn::Checkpoint;
use tus_core::rl::{evaluate_policy, train_policy, Decider, EvalReport, PolicyEnv, PolicyEpochLog};
use tus_core::rules::RuleSystemAgent;
use tus_core::sim::{generate_corpus, simulate_batch, BatchConfig, SystemAgent, UserSimulator};
use tus_core::tus::{model_from_checkpoint, train_supervised, EpochRecord, TusAgent, TusModel};
use tus_core::{DialogueAct, GoalConfig, Ontology};

use crate::config::{Command, RunConfig, SplitPart, UserSpec};
use crate::exit::MissingInput;
use crate::plot;
use crate::rundir::RunDir;

/// Seed of the bundled toy database.
pub const TOY_DB_SEED: u64 = 1;

pub fn execute(config: &RunConfig, dir: &RunDir) -> anyhow::Result<()> {
    let seed = config.seed.unwrap_or_default();
    match &config.command {
        Command::MakeOntology {} => make_ontology(config, dir),
        Command::MakeDb {
            entities_per_domain,
        } => make_db(config, dir, seed, *entities_per_domain),
        Command::GenCorpus {
            n_dialogues,
            unsat_prob,
            max_turns,
        } => gen_corpus(config, dir, seed, *n_dialogues, *unsat_prob, *max_turns),
        Command::TrainUs {} => train_us(config, dir),
        Command::EvalUsCorpus { checkpoint, part } => {
            eval_us_corpus(config, dir, checkpoint, *part)
        }
        Command::Simulate {
            user,
            n_dialogues,
            max_turns,
        } => simulate(config, dir, seed, user, *n_dialogues, *max_turns),
        Command::TrainPolicy { user } => train_policy_cmd(config, dir, user),
        Command::CrossEval { simulators } => cross_eval(config, dir, simulators),
        Command::ZeroShot { domains } => zero_shot(config, dir, domains),
        Command::Ablation { variants } => ablation(config, dir, variants),
        Command::DumpFeatures { dialogue } => dump_features(config, dir, dialogue),
        Command::Chat { checkpoint } => chat(config, dir, seed, checkpoint),
        Command::PlotCurves { inputs } => plot_curves(dir, inputs),
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

fn load_ontology(config: &RunConfig) -> anyhow::Result<Arc<Ontology>> {
    let o = match &config.ontology {
        Some(p) => {
            Ontology::load(p).with_context(|| format!("loading ontology {}", p.display()))?
        }
        None => Ontology::toy(),
    };
    Ok(Arc::new(o))
}

fn load_db(config: &RunConfig, o: &Ontology) -> anyhow::Result<Arc<EntityDb>> {
    let db = match &config.db {
        Some(p) => EntityDb::load(p, o).with_context(|| format!("loading db {}", p.display()))?,
        None => EntityDb::generate(
            o,
            DEFAULT_ENTITIES_PER_DOMAIN,
            &mut ChaCha8Rng::seed_from_u64(TOY_DB_SEED),
        ),
    };
    Ok(Arc::new(db))
}

fn load_corpus(config: &RunConfig) -> anyhow::Result<Corpus> {
    let path = config.corpus.as_ref().context("no corpus configured")?;
    Corpus::load_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn split(config: &RunConfig, corpus: &Corpus) -> SplitSpec {
    SplitSpec::standard(corpus, config.split.dev, config.split.test)
}

fn load_tus(path: &Path, o: &Arc<Ontology>) -> anyhow::Result<TusModel> {
    TusModel::load(path, o.clone())
        .with_context(|| format!("loading TUS checkpoint {}", path.display()))
}

fn simulator(spec: &UserSpec, o: &Arc<Ontology>) -> anyhow::Result<Simulator<'static>> {
    Ok(match spec {
        UserSpec::Abus => {
            let o = o.clone();
            Simulator::new(spec.name(), move || {
                Box::new(AgendaUser::new(o.clone())) as Box<dyn UserSimulator>
            })
        }
        UserSpec::Tus(path) => Simulator::tus(spec.name(), Arc::new(load_tus(path, o)?)),
    })
}

fn policy_env(config: &RunConfig) -> anyhow::Result<PolicyEnv> {
    let o = load_ontology(config)?;
    let db = load_db(config, &o)?;
    Ok(PolicyEnv::new(o, db))
}

/// Flat records to CSV text.
fn csv_text<R: Serialize>(rows: impl IntoIterator<Item = R>) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn log_epoch(dir: &RunDir, label: &str, r: &EpochRecord) {
    eprintln!(
        "[{label}] epoch {:>3} loss {:.4} dev turn-acc {:.4} len {:.3}",
        r.epoch, r.train_loss, r.dev.turn_accuracy, r.dev.len
    );
    dir.log(
        "epoch",
        json!({
            "label": label,
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            "dev_turn_accuracy": r.dev.turn_accuracy,
            "dev_f1": r.dev.f1,
            "dev_len": r.dev.len,
        }),
    );
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    label: &'a str,
    epoch: usize,
    train_loss: f64,
    dev_turn_accuracy: f64,
    dev_slot_accuracy: f64,
    dev_f1: f64,
    dev_len: f64,
}

fn history_rows<'a>(
    label: &'a str,
    history: &'a [EpochRecord],
) -> impl Iterator<Item = HistoryRow<'a>> {
    history.iter().map(move |r| HistoryRow {
        label,
        epoch: r.epoch,
        train_loss: r.train_loss,
        dev_turn_accuracy: r.dev.turn_accuracy,
        dev_slot_accuracy: r.dev.slot_accuracy,
        dev_f1: r.dev.f1,
        dev_len: r.dev.len,
    })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    label: &'a str,
    seed: u64,
    epoch: usize,
    success_rate: f64,
    avg_turns: f64,
    avg_return: f64,
    entropy: f64,
}

fn curve_rows<'a>(
    label: &'a str,
    seed: u64,
    curve: &'a [PolicyEpochLog],
) -> impl Iterator<Item = CurveRow<'a>> {
    curve.iter().map(move |e| CurveRow {
        label,
        seed,
        epoch: e.epoch,
        success_rate: e.success_rate,
        avg_turns: e.avg_turns,
        avg_return: e.avg_return,
        entropy: e.entropy,
    })
}

// ---------------------------------------------------------------------------
// Fixtures and corpora
// ---------------------------------------------------------------------------

fn make_ontology(config: &RunConfig, dir: &RunDir) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    o.save(dir.file("ontology.json"))?;
    dir.log(
        "written",
        json!({"file": "ontology.json", "fingerprint": o.fingerprint()}),
    );
    Ok(())
}

fn make_db(config: &RunConfig, dir: &RunDir, seed: u64, n: usize) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let db = EntityDb::generate(&o, n, &mut ChaCha8Rng::seed_from_u64(seed));
    db.save(dir.file("db.json"))?;
    dir.log(
        "written",
        json!({"file": "db.json", "entities_per_domain": n}),
    );
    Ok(())
}

fn gen_corpus(
    config: &RunConfig,
    dir: &RunDir,
    seed: u64,
    n_dialogues: usize,
    unsat_prob: f64,
    max_turns: usize,
) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let db = load_db(config, &o)?;
    let batch = BatchConfig {
        n_dialogues,
        seed,
        goal: GoalConfig::default(),
        unsat_prob,
        max_turns,
    };
    let (corpus, successes) = generate_corpus(&o, &db, &batch)?;
    corpus.save_jsonl(dir.file("corpus.jsonl"))?;
    let stats = CorpusStats::from_outcomes(&corpus, &successes);
    dir.write_json("corpus.stats.json", &Report::new("corpus-stats", &stats))?;
    let split = split(config, &corpus);
    dir.write_json("split/train.json", &split.train)?;
    dir.write_json("split/dev.json", &split.dev)?;
    dir.write_json("split/test.json", &split.test)?;
    dir.log("corpus", serde_json::to_value(&stats)?);
    eprintln!(
        "{} dialogues, success {:.3}, {:.2} turns, {:.2} first-turn slots",
        stats.n_dialogues, stats.success_rate, stats.avg_turns, stats.avg_first_turn_slots
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// User simulator training and evaluation
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainUsReport<'a> {
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    best_epoch: usize,
    n_train_examples: usize,
    skipped: &'a [(String, String)],
    history: &'a [EpochRecord],
    test: Option<CorpusFitReport>,
}

fn train_us(config: &RunConfig, dir: &RunDir) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let corpus = load_corpus(config)?;
    let split = split(config, &corpus);
    let test = corpus.subset(&split.test);
    let (ckpt, report) = train_supervised(
        &corpus.subset(&split.train),
        &corpus.subset(&split.dev),
        &o,
        &config.train,
        |r| log_epoch(dir, "train-us", r),
    )?;
    ckpt.save(dir.file("tus.ckpt"))?;
    let test_fit = if test.is_empty() {
        None
    } else {
        Some(corpus_fit(&ckpt.network, &test, &o, config.train.window)?.0)
    };
    let body = TrainUsReport {
        n_train: split.train.len(),
        n_dev: split.dev.len(),
        n_test: split.test.len(),
        best_epoch: report.best_epoch,
        n_train_examples: report.n_train_examples,
        skipped: &report.skipped,
        history: &report.history,
        test: test_fit,
    };
    dir.write_json("report.json", &Report::new("train-us", body))?;
    dir.write_text(
        "history.csv",
        &csv_text(history_rows("train-us", &report.history))?,
    )?;
    Ok(())
}

fn eval_us_corpus(
    config: &RunConfig,
    dir: &RunDir,
    checkpoint: &Path,
    part: SplitPart,
) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let corpus = load_corpus(config)?;
    let ckpt = Checkpoint::load(checkpoint, &o.fingerprint())
        .with_context(|| format!("loading TUS checkpoint {}", checkpoint.display()))?;
    let window = model_from_checkpoint(&ckpt, o.clone()).window;
    let split = split(config, &corpus);
    let data = match part {
        SplitPart::All => corpus,
        SplitPart::Train => corpus.subset(&split.train),
        SplitPart::Dev => corpus.subset(&split.dev),
        SplitPart::Test => corpus.subset(&split.test),
    };
    let (fit, preds) = corpus_fit(&ckpt.network, &data, &o, window)?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    dir.write_text("predictions.jsonl", &lines)?;
    dir.write_json("report.json", &Report::new("eval-us-corpus", &fit))?;
    eprintln!(
        "P {:.3} R {:.3} F1 {:.3} turn-acc {:.3} LEN {:.3} (target {:.3})",
        fit.precision, fit.recall, fit.f1, fit.turn_accuracy, fit.len, fit.target_len
    );
    Ok(())
}

fn simulate(
    config: &RunConfig,
    dir: &RunDir,
    seed: u64,
    user: &UserSpec,
    n_dialogues: usize,
    max_turns: usize,
) -> anyhow::Result<()> {
    let env = policy_env(config)?;
    let sim = simulator(user, &env.ontology)?;
    let (o, db) = (env.ontology.clone(), env.db.clone());
    let batch = BatchConfig {
        n_dialogues,
        seed,
        goal: env.goal.clone(),
        unsat_prob: env.unsat_prob,
        max_turns,
    };
    let outcomes = simulate_batch(
        &o,
        &db,
        sim.make.as_ref(),
        || Box::new(RuleSystemAgent::new(o.clone(), db.clone())) as Box<dyn SystemAgent>,
        &batch,
    )?;
    let corpus = Corpus::new(outcomes.iter().map(|x| x.dialogue.clone()).collect());
    corpus.save_jsonl(dir.file("dialogues.jsonl"))?;
    let stats = BehaviorStats::from_outcomes(&outcomes);
    let successes: Vec<bool> = outcomes.iter().map(|x| x.success).collect();
    dir.write_json(
        "report.json",
        &Report::new(
            "simulate",
            json!({"user": sim.name, "system": "rules", "stats": stats, "success": successes}),
        ),
    )?;
    eprintln!(
        "{}: success {:.3}, {:.2} turns, {:.2} first-turn slots",
        sim.name, stats.success_rate, stats.avg_turns, stats.first_turn_len
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Policy learning
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainPolicyReport<'a> {
    user: &'a str,
    seed: u64,
    curve: &'a [PolicyEpochLog],
    eval: &'a EvalReport,
    random_baseline: f64,
}

fn train_policy_cmd(config: &RunConfig, dir: &RunDir, user: &UserSpec) -> anyhow::Result<()> {
    let env = policy_env(config)?;
    let sim = simulator(user, &env.ontology)?;
    let schedule = &config.schedule;
    let ppo = tus_core::rl::PpoConfig {
        seed: schedule.seeds[0],
        ..schedule.ppo.clone()
    };
    let (policy, curve) = train_policy(&env, sim.make.as_ref(), &ppo, |log, _| {
        eprintln!(
            "[train-policy] epoch {:>3} success {:.3} turns {:.2} entropy {:.3}",
            log.epoch, log.success_rate, log.avg_turns, log.entropy
        );
        dir.log("epoch", serde_json::to_value(log).unwrap_or_default());
    })?;
    policy.save(
        dir.file("policy.ckpt"),
        &env.ontology.fingerprint(),
        json!({"user": sim.name, "seed": ppo.seed}),
    )?;
    let greedy = Decider::Greedy(Arc::new(policy));
    let eval = evaluate_policy(
        &env,
        sim.make.as_ref(),
        &greedy,
        schedule.n_eval,
        schedule.eval_seed,
    )?;
    let random = evaluate_policy(
        &env,
        sim.make.as_ref(),
        &Decider::Random,
        schedule.n_eval,
        schedule.eval_seed,
    )?;
    let body = TrainPolicyReport {
        user: &sim.name,
        seed: ppo.seed,
        curve: &curve,
        eval: &eval,
        random_baseline: random.success_rate,
    };
    dir.write_json("report.json", &Report::new("train-policy", body))?;
    dir.write_text(
        "curve.csv",
        &csv_text(curve_rows(&sim.name, ppo.seed, &curve))?,
    )?;
    eprintln!(
        "greedy success {:.3} vs random {:.3} on {}",
        eval.success_rate, random.success_rate, sim.name
    );
    Ok(())
}

fn cross_eval(config: &RunConfig, dir: &RunDir, specs: &[UserSpec]) -> anyhow::Result<()> {
    let env = policy_env(config)?;
    let sims = specs
        .iter()
        .map(|s| simulator(s, &env.ontology))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let names: Vec<&str> = sims.iter().map(|s| s.name.as_str()).collect();
    if names
        .iter()
        .enumerate()
        .any(|(i, n)| names[..i].contains(n))
    {
        return Err(crate::exit::ConfigError(format!(
            "simulator names must be distinct: {names:?}"
        ))
        .into());
    }
    dir.log(
        "start",
        json!({"simulators": names, "seeds": config.schedule.seeds}),
    );
    let matrix = run_cross_model(&env, &sims, &config.schedule)?;
    let mut nested: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for c in &matrix.cells {
        nested
            .entry(&c.train)
            .or_default()
            .insert(&c.eval, c.success.mean);
    }
    dir.write_json("matrix.json", &nested)?;
    dir.write_json("report.json", &Report::new("cross-eval", &matrix))?;
    dir.write_text("matrix.csv", &matrix.to_csv())?;
    let curves = matrix
        .curves
        .iter()
        .flat_map(|c| curve_rows(&c.train, c.seed, &c.epochs));
    dir.write_text("curves.csv", &csv_text(curves)?)?;
    for c in &matrix.cells {
        eprintln!(
            "trained on {:<8} evaluated on {:<8} success {:.3} ± {:.3}{}",
            c.train,
            c.eval,
            c.success.mean,
            c.success.stderr,
            if c.failed.is_some() {
                " (some seeds failed)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn zero_shot(config: &RunConfig, dir: &RunDir, domains: &[String]) -> anyhow::Result<()> {
    let env = policy_env(config)?;
    let corpus = load_corpus(config)?;
    let split = split(config, &corpus);
    let domains: Vec<String> = if domains.is_empty() {
        env.ontology
            .domains
            .iter()
            .map(|d| d.name.clone())
            .collect()
    } else {
        domains.to_vec()
    };
    let evaluator = simulator(&UserSpec::Abus, &env.ontology)?;
    let report = run_zero_shot(
        &corpus,
        &env,
        &split,
        &config.train,
        &config.schedule,
        &domains,
        &evaluator,
        None,
        |stage| {
            eprintln!("[zero-shot] {stage}");
            dir.log("stage", json!({"stage": stage}));
        },
    )?;
    dir.write_json("report.json", &Report::new("zero-shot", &report))?;
    dir.write_text("zero_shot.csv", &report.to_csv())?;
    for (d, gap) in report.held_out_gaps() {
        eprintln!("held out {d}: success gap to full {gap:+.3}");
    }
    Ok(())
}

fn ablation(config: &RunConfig, dir: &RunDir, variants: &[AblationVariant]) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let corpus = load_corpus(config)?;
    let split = split(config, &corpus);
    let variants = if variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        variants.to_vec()
    };
    let (report, checkpoints) =
        run_ablation(&corpus, &o, &split, &config.train, &variants, |v, r| {
            log_epoch(dir, v.name(), r)
        })?;
    for (variant, ckpt) in variants.iter().zip(&checkpoints) {
        ckpt.save(dir.file(&format!("{}.ckpt", variant.name().trim_start_matches('+'))))?;
    }
    dir.write_json("report.json", &Report::new("ablation", &report))?;
    dir.write_text("ablation.csv", &report.to_csv())?;
    let history = report
        .rows
        .iter()
        .flat_map(|r| history_rows(&r.name, &r.history));
    dir.write_text("history.csv", &csv_text(history)?)?;
    for r in &report.rows {
        eprintln!(
            "{:<13} P {:.3} R {:.3} F1 {:.3} turn-acc {:.3} LEN {:.3}",
            r.name, r.test.precision, r.test.recall, r.test.f1, r.test.turn_accuracy, r.test.len
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inspection
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FeatureDump {
    dialogue: String,
    width: usize,
    layout: FeatureLayout,
    offsets: BTreeMap<&'static str, usize>,
    turns: Vec<TurnDump>,
}

#[derive(Serialize)]
struct TurnDump {
    turn: usize,
    slots: Vec<String>,
    targets: Vec<usize>,
    features: Vec<Vec<f64>>,
}

fn dump_features(config: &RunConfig, dir: &RunDir, id: &str) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let corpus = load_corpus(config)?;
    let dialogue = corpus
        .get(id)
        .ok_or_else(|| MissingInput(format!("dialogue {id:?} is not in the corpus")))?;
    let layout = config.train.layout(&o);
    let encoded = replay_dialogue(dialogue, &o, layout.l_d, layout.l_s, Some(&layout))?;
    let mut offsets = BTreeMap::new();
    offsets.insert("user_value", FeatureLayout::USER_VALUE);
    offsets.insert("sys_value", FeatureLayout::SYS_VALUE);
    offsets.insert("type", FeatureLayout::TYPE);
    offsets.insert("fulfilled", FeatureLayout::FULFILLED);
    offsets.insert("first", FeatureLayout::FIRST);
    offsets.insert("system_action", FeatureLayout::BASIC_WIDTH);
    offsets.insert("user_action", layout.user_action_offset());
    if layout.index_features {
        offsets.insert("domain_index", layout.domain_index_offset());
        offsets.insert("slot_index", layout.slot_index_offset());
    }
    let turns = encoded
        .blocks
        .iter()
        .zip(&encoded.examples)
        .map(|(b, ex)| TurnDump {
            turn: b.turn,
            slots: b.slots().map(|k| k.to_string()).collect(),
            targets: ex.targets.clone(),
            features: b.rows.iter().map(|r| r.values.clone()).collect(),
        })
        .collect();
    let dump = FeatureDump {
        dialogue: id.to_string(),
        width: layout.width(),
        layout,
        offsets,
        turns,
    };
    dir.write_json("features.json", &dump)?;
    Ok(())
}

const CHAT_USAGE: &str = "enter system acts, one per line, then an empty line to send the turn:
  general.<intent>                 e.g. general.reqmore
  <intent> <domain> <slot>=<value> e.g. recommend lodging area=north
  request <domain> <slot>          e.g. request lodging stars
  quit                             ends the session";

fn format_acts(acts: &[DialogueAct]) -> String {
    if acts.is_empty() {
        return "(nothing)".into();
    }
    acts.iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Interactive session: a human plays the system against a trained TUS.
/// Reads from stdin, so it also works with piped scripts.
fn chat(config: &RunConfig, dir: &RunDir, seed: u64, checkpoint: &Path) -> anyhow::Result<()> {
    let o = load_ontology(config)?;
    let db = load_db(config, &o)?;
    let model = Arc::new(load_tus(checkpoint, &o)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = sample_db_goal(&o, &db, &mut rng, &GoalConfig::default(), 0.0)?;
    let mut user = TusAgent::new(model);
    user.start(goal.clone(), seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "user goal:")?;
    for d in &goal.domains {
        let cons: Vec<String> = d
            .constraints
            .iter()
            .map(|(s, v)| format!("{s}={v}"))
            .collect();
        writeln!(
            out,
            "  {}: {} | requests: {}",
            d.domain,
            cons.join(", "),
            d.requests.join(", ")
        )?;
    }
    writeln!(out, "{CHAT_USAGE}")?;
    let mut transcript = String::new();
    let mut turn = |system: &[DialogueAct],
                    out: &mut std::io::StdoutLock,
                    user: &mut TusAgent|
     -> anyhow::Result<bool> {
        let (decoded, done) = user.step_detailed(system)?;
        writeln!(out, "user: {}", format_acts(&decoded.acts))?;
        transcript.push_str(&serde_json::to_string(
            &json!({"system": system, "user": decoded.acts}),
        )?);
        transcript.push('\n');
        Ok(done)
    };
    let mut done = turn(&[], &mut out, &mut user)?;
    let mut pending = Vec::new();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    while !done {
        let line = match lines.next() {
            Some(l) => l?,
            None if pending.is_empty() => break,
            None => String::new(),
        };
        let line = line.trim();
        if line == "quit" {
            break;
        }
        if line.is_empty() {
            if pending.is_empty() {
                continue;
            }
            done = turn(&std::mem::take(&mut pending), &mut out, &mut user)?;
            continue;
        }
        match DialogueAct::parse_command(line)
            .map_err(|e| e.to_string())
            .and_then(|a| {
                o.validate_acts(std::slice::from_ref(&a), tus_core::Speaker::System)
                    .map(|_| a)
                    .map_err(|e| e.to_string())
            }) {
            Ok(act) => pending.push(act),
            Err(e) => writeln!(out, "could not parse {line:?}: {e}\n{CHAT_USAGE}")?,
        }
    }
    if done {
        writeln!(out, "[user ended the dialogue]")?;
    }
    dir.write_text("transcript.jsonl", &transcript)?;
    Ok(())
}

fn plot_curves(dir: &RunDir, inputs: &[std::path::PathBuf]) -> anyhow::Result<()> {
    for (i, path) in inputs.iter().enumerate() {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| crate::exit::ConfigError(format!("{}: {e}", path.display())))?;
        let chart = plot::chart_for_report(&report)
            .with_context(|| format!("plotting {}", path.display()))?;
        let name = format!("{i}-{}.svg", report["kind"].as_str().unwrap_or("report"));
        plot::write_svg(&dir.file(&name), &chart)?;
        dir.log("written", json!({"file": name, "source": path}));
    }
    Ok(())
}
