//! The transformer user simulator: decoding network outputs into user acts,
//! and the supervised training driver.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::act::DialogueAct;
use crate::corpus::{encode_corpus, Corpus, EncodedCorpus};
use crate::encoder::{
    assign_indices, build_input, encode_turn, FeatureLayout, IndexMap, InputSequence, OutputClass,
    SlotList, TurnBlock, DEFAULT_WINDOW, N_CLASSES,
};
use crate::eval::{fit_metrics, CorpusFitReport};
use crate::goal::{SlotRole, UserGoal};
use crate::nn::{Adam, Checkpoint, Example, ForwardOutput, NetConfig, NetError, Network};
use crate::ontology::{Ontology, SlotKey, DONTCARE, REQUESTED};
use crate::sim::{is_bye, SimError, UserSimulator, UserTurn, BYE};
use crate::state::{mark_fulfilled, DialogueState};

#[derive(Debug, Error)]
pub enum TusError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training corpus is empty after encoding ({skipped} dialogues skipped)")]
    EmptyCorpus { skipped: usize },
    #[error("dev metrics are not finite at epoch {0}")]
    NonFiniteMetrics(usize),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Turns per-slot network outputs into acts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodePolicy {
    /// Domains whose head probability reaches this threshold may act.
    pub domain_threshold: f64,
    /// Apply the domain gate at all (only meaningful for models trained
    /// with the domain loss).
    pub use_domain_gate: bool,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            domain_threshold: 0.5,
            use_domain_gate: true,
        }
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-slot argmax classes, with slots outside the gated domains set to
/// none. When the gate would silence every slot that has a non-none class,
/// the most probable of those slots' domains is let through.
pub fn gated_classes(
    out: &ForwardOutput,
    slot_domains: &[usize],
    policy: &DecodePolicy,
) -> Vec<usize> {
    let mut classes: Vec<usize> = out.slot_logits.rows().into_iter().map(argmax).collect();
    if !policy.use_domain_gate {
        return classes;
    }
    let probs = out.domain_probs();
    let open = |d: usize| probs.get(d).copied().unwrap_or(0.0) >= policy.domain_threshold;
    let active: Vec<usize> = classes
        .iter()
        .zip(slot_domains)
        .filter(|(c, _)| **c != 0)
        .map(|(_, &d)| d)
        .collect();
    let fallback = if !active.is_empty() && !active.iter().any(|&d| open(d)) {
        let p = |d: usize| probs.get(d).copied().unwrap_or(0.0);
        active.iter().copied().max_by(|&a, &b| {
            p(a).partial_cmp(&p(b))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
    } else {
        None
    };
    for (c, &d) in classes.iter_mut().zip(slot_domains) {
        if !open(d) && Some(d) != fallback {
            *c = 0;
        }
    }
    classes
}

/// Source of network outputs for the agent; the trained network in
/// practice, a stub in tests.
pub trait Predictor: Send + Sync {
    fn predict(&self, input: &InputSequence) -> Result<ForwardOutput, NetError>;
}

impl Predictor for Network {
    fn predict(&self, input: &InputSequence) -> Result<ForwardOutput, NetError> {
        self.forward(input)
    }
}

/// Trained simulator shared read-only by every session.
pub struct TusModel {
    pub ontology: Arc<Ontology>,
    pub layout: FeatureLayout,
    pub window: usize,
    pub decode: DecodePolicy,
    pub predictor: Arc<dyn Predictor>,
}

impl TusModel {
    pub fn from_network(ontology: Arc<Ontology>, network: Network, window: usize) -> Self {
        let decode = DecodePolicy {
            use_domain_gate: network.config.domain_loss,
            ..DecodePolicy::default()
        };
        Self {
            ontology,
            layout: network.layout,
            window,
            decode,
            predictor: Arc::new(network),
        }
    }

    /// Loads a checkpoint written by [`train_supervised`].
    pub fn load(path: impl AsRef<Path>, ontology: Arc<Ontology>) -> Result<Self, NetError> {
        let ckpt = Checkpoint::load(path, &ontology.fingerprint())?;
        let window = ckpt
            .extra
            .get("window")
            .and_then(|w| w.as_u64())
            .unwrap_or(DEFAULT_WINDOW as u64) as usize;
        Ok(Self::from_network(ontology, ckpt.network, window))
    }
}

struct Session {
    goal: UserGoal,
    state: DialogueState,
    index: IndexMap,
    slots: SlotList,
    blocks: Vec<TurnBlock>,
    rng: ChaCha8Rng,
    done: bool,
}

/// Per-dialogue simulator; one per concurrent dialogue.
pub struct TusAgent {
    model: Arc<TusModel>,
    session: Option<Session>,
    empty_goal: UserGoal,
}

/// One decoded turn, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTurn {
    pub slots: Vec<SlotKey>,
    pub raw_classes: Vec<usize>,
    pub final_classes: Vec<usize>,
    pub acts: Vec<DialogueAct>,
}

impl TusAgent {
    pub fn new(model: Arc<TusModel>) -> Self {
        Self {
            model,
            session: None,
            empty_goal: UserGoal::default(),
        }
    }

    pub fn state(&self) -> Option<&DialogueState> {
        self.session.as_ref().map(|s| &s.state)
    }

    pub fn slot_order(&self) -> Option<Vec<SlotKey>> {
        self.session.as_ref().map(|s| s.slots.current(&s.state))
    }

    /// Maps one slot's class to an act under the legality rules; returns
    /// the class actually used.
    fn realize(
        ontology: &Ontology,
        session: &mut Session,
        key: &SlotKey,
        class: usize,
    ) -> (usize, Option<DialogueAct>) {
        let spec = ontology.slot(key);
        let informable = spec.is_some_and(|s| s.informable());
        let requestable = spec.is_some_and(|s| s.requestable);
        let goal_value = session.goal.constraint_value(key).map(str::to_string);
        let class = match OutputClass::from_index(class).unwrap_or(OutputClass::None) {
            OutputClass::FromSystem => {
                let sys = session
                    .state
                    .system_value(key)
                    .filter(|v| *v != REQUESTED && informable);
                match (sys, &goal_value) {
                    (Some(v), _) => {
                        return (4, Some(DialogueAct::inform(key, v.to_string())));
                    }
                    (None, Some(_)) => OutputClass::FromGoal,
                    (None, None) => OutputClass::None,
                }
            }
            other => other,
        };
        match class {
            OutputClass::None => (0, None),
            OutputClass::DontCare if informable => {
                (1, Some(DialogueAct::inform(key, DONTCARE.to_string())))
            }
            OutputClass::Request if requestable => (2, Some(DialogueAct::request(key))),
            OutputClass::FromGoal => match goal_value {
                Some(v) => (3, Some(DialogueAct::inform(key, v))),
                None => (0, None),
            },
            OutputClass::Random if informable => {
                let values = &spec.expect("informable slot").values;
                let current =
                    goal_value.or_else(|| session.state.system_value(key).map(str::to_string));
                let choices: Vec<&String> = values
                    .iter()
                    .filter(|v| Some(v.as_str()) != current.as_deref())
                    .collect();
                let Some(value) = choices.choose(&mut session.rng).map(|v| (*v).clone()) else {
                    return (0, None);
                };
                if session.goal.role(key) == Some(SlotRole::Constraint) {
                    session
                        .goal
                        .change_value(key, &value)
                        .expect("constraint slot is in the goal");
                }
                (5, Some(DialogueAct::inform(key, value)))
            }
            _ => (0, None),
        }
    }

    /// Runs one turn and returns the decoding details.
    pub fn step_detailed(
        &mut self,
        system_acts: &[DialogueAct],
    ) -> Result<(DecodedTurn, bool), SimError> {
        let model = self.model.clone();
        let session = self
            .session
            .as_mut()
            .ok_or_else(|| SimError::User("step before start".into()))?;
        let bye = || vec![DialogueAct::general(BYE)];
        if session.done {
            return Ok((DecodedTurn::empty(bye()), true));
        }
        session
            .state
            .apply_system_acts(&model.ontology, system_acts)
            .map_err(|source| SimError::Act {
                speaker: crate::act::Speaker::System,
                source,
            })?;
        session
            .slots
            .observe_system_turn(&session.state, &mut session.index)
            .map_err(|e| SimError::User(e.to_string()))?;
        mark_fulfilled(&mut session.goal, &session.state);

        if is_bye(system_acts) || session.goal.all_fulfilled() {
            session.done = true;
            let acts = bye();
            session
                .state
                .record_user_acts(&model.ontology, &acts, Default::default())
                .map_err(|e| SimError::User(e.to_string()))?;
            return Ok((DecodedTurn::empty(acts), true));
        }

        let slots = session.slots.current(&session.state);
        let block = encode_turn(
            &slots,
            &session.goal,
            &session.state,
            &session.index,
            &model.layout,
            &model.ontology,
        )
        .map_err(|e| SimError::User(e.to_string()))?;
        session.blocks.push(block);
        let start = session.blocks.len().saturating_sub(model.window);
        let window: Vec<&TurnBlock> = session.blocks[start..].iter().collect();
        let input = build_input(&window, model.window, model.layout.width());
        let out = model
            .predictor
            .predict(&input)
            .map_err(|e| SimError::User(e.to_string()))?;
        let slot_domains: Vec<usize> = slots
            .iter()
            .map(|k| session.index.domain_index(&k.domain).unwrap_or(usize::MAX))
            .collect();
        let raw: Vec<usize> = out.slot_logits.rows().into_iter().map(argmax).collect();
        let gated = gated_classes(&out, &slot_domains, &model.decode);
        let mut final_classes = Vec::with_capacity(slots.len());
        let mut acts = Vec::new();
        for (key, &class) in slots.iter().zip(&gated) {
            let (used, act) = Self::realize(&model.ontology, session, key, class);
            final_classes.push(used);
            acts.extend(act);
        }
        let outputs = slots
            .iter()
            .cloned()
            .zip(final_classes.iter().copied())
            .collect();
        session
            .state
            .record_user_acts(&model.ontology, &acts, outputs)
            .map_err(|source| SimError::Act {
                speaker: crate::act::Speaker::User,
                source,
            })?;
        Ok((
            DecodedTurn {
                slots,
                raw_classes: raw,
                final_classes,
                acts,
            },
            false,
        ))
    }
}

impl DecodedTurn {
    fn empty(acts: Vec<DialogueAct>) -> Self {
        Self {
            slots: Vec::new(),
            raw_classes: Vec::new(),
            final_classes: Vec::new(),
            acts,
        }
    }
}

impl UserSimulator for TusAgent {
    fn name(&self) -> &str {
        "tus"
    }

    fn start(&mut self, goal: UserGoal, seed: u64) -> Result<(), SimError> {
        let layout = &self.model.layout;
        goal.validate(&self.model.ontology, layout.l_d, layout.l_s)
            .map_err(|e| SimError::User(e.to_string()))?;
        let index = assign_indices(&goal, layout.l_d, layout.l_s)
            .map_err(|e| SimError::User(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = SlotList::shuffled(&goal, &mut rng);
        self.session = Some(Session {
            goal,
            state: DialogueState::new(),
            index,
            slots,
            blocks: Vec::new(),
            rng,
            done: false,
        });
        Ok(())
    }

    fn step(&mut self, system_acts: &[DialogueAct]) -> Result<UserTurn, SimError> {
        let (turn, done) = self.step_detailed(system_acts)?;
        Ok(UserTurn {
            acts: turn.acts,
            done,
        })
    }

    fn goal(&self) -> &UserGoal {
        self.session
            .as_ref()
            .map(|s| &s.goal)
            .unwrap_or(&self.empty_goal)
    }
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub l_d: usize,
    pub l_s: usize,
    pub index_features: bool,
    /// Stop when dev turn accuracy has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            window: DEFAULT_WINDOW,
            epochs: 20,
            batch_size: 32,
            l_d: crate::goal::DEFAULT_MAX_DOMAINS,
            l_s: crate::goal::DEFAULT_MAX_SLOTS,
            index_features: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn layout(&self, ontology: &Ontology) -> FeatureLayout {
        FeatureLayout::for_ontology(ontology, self.l_d, self.l_s)
            .with_index_features(self.index_features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: CorpusFitReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub n_train_examples: usize,
    pub skipped: Vec<(String, String)>,
}

/// All (dialogue, turn) examples of an encoded corpus.
pub fn corpus_examples(encoded: &EncodedCorpus, window: usize, width: usize) -> Vec<Example> {
    let mut out = Vec::with_capacity(encoded.n_examples());
    for d in &encoded.dialogues {
        for (t, ex) in d.examples.iter().enumerate() {
            let blocks: Vec<&TurnBlock> = d.blocks[..=t].iter().collect();
            out.push(Example {
                input: build_input(&blocks, window, width),
                targets: ex.targets.clone(),
                domain_targets: ex.domain_targets.clone(),
            });
        }
    }
    out
}

/// Shuffled, length-bucketed batches of example indices.
fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let bucket = batch_size * 8;
    let mut batches = Vec::new();
    for chunk in order.chunks_mut(bucket) {
        chunk.sort_by_key(|&i| lengths[i]);
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains a network on `train` and keeps the parameters with the best dev
/// turn accuracy. `on_epoch` observes every epoch record.
pub fn train_supervised(
    train: &Corpus,
    dev: &Corpus,
    ontology: &Ontology,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainReport), TusError> {
    if config.batch_size == 0 || config.window == 0 {
        return Err(TusError::Config(
            "batch size and window must be positive".into(),
        ));
    }
    let layout = config.layout(ontology);
    let mut net_config = config.net.clone();
    net_config.domain_head_dim = config.l_d;
    let train_enc = encode_corpus(train, ontology, &layout);
    if train_enc.dialogues.is_empty() {
        return Err(TusError::EmptyCorpus {
            skipped: train_enc.skipped.len(),
        });
    }
    let dev_enc = encode_corpus(dev, ontology, &layout);
    let examples = corpus_examples(&train_enc, config.window, layout.width());
    let lengths: Vec<usize> = examples.iter().map(|e| e.input.len()).collect();

    let mut network = Network::new(net_config.clone(), layout)?;
    let decode = DecodePolicy {
        use_domain_gate: net_config.domain_loss,
        ..DecodePolicy::default()
    };
    let mut adam = Adam::new(network.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(net_config.seed ^ 0x7261_696e);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(&lengths, config.batch_size, &mut rng);
        for batch in &batches {
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let stats = network.train_step(&refs, &mut adam, &mut rng)?;
            total += stats.loss * refs.len() as f64;
        }
        let eval_set = if dev_enc.dialogues.is_empty() {
            &train_enc
        } else {
            &dev_enc
        };
        let dev_report = fit_metrics(&network, eval_set, config.window, &decode)?;
        if !dev_report.is_finite() {
            return Err(TusError::NonFiniteMetrics(epoch));
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / examples.len() as f64,
            dev: dev_report,
        };
        on_epoch(&record);
        let acc = record.dev.turn_accuracy;
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, network.clone()));
        }
        history.push(record);
        if let (Some(p), Some((_, best_epoch, _))) = (config.patience, &best) {
            if epoch >= best_epoch + p {
                break;
            }
        }
    }
    let (best_epoch, best_net) = match best {
        Some((_, e, n)) => (e, n),
        None => (0, network),
    };
    let report = TrainReport {
        history,
        best_epoch,
        n_train_examples: examples.len(),
        skipped: train_enc.skipped,
    };
    let ckpt = Checkpoint {
        network: best_net,
        ontology_fingerprint: ontology.fingerprint(),
        adam: Some(adam),
        rng: Some(rng),
        extra: serde_json::json!({ "window": config.window, "best_epoch": best_epoch }),
    };
    Ok((ckpt, report))
}

/// Convenience: ontology-bound model from a training checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint, ontology: Arc<Ontology>) -> TusModel {
    let window = ckpt
        .extra
        .get("window")
        .and_then(|w| w.as_u64())
        .unwrap_or(DEFAULT_WINDOW as u64) as usize;
    TusModel::from_network(ontology, ckpt.network.clone(), window)
}

const _: () = assert!(N_CLASSES == 6);
