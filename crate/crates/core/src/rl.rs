//! Learnable system policy over a delexicalized action set, trained with
//! clipped-surrogate policy gradients against any user simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::act::DialogueAct;
use crate::db::{sample_db_goal, EntityDb};
use crate::goal::GoalConfig;
use crate::nn::{read_container, write_container, Adam, NetError, ParamSet};
use crate::ontology::{
    Ontology, BOOKING_SLOT, ENTITY_SLOT, GENERAL, REQUESTED, USER_INFORM, USER_REQUEST,
};
use crate::rules::Belief;
use crate::sim::{dialogue_seed, run_dialogue, SimError, SystemAgent, UserSimulator, BYE};

pub const POLICY_SCHEMA: &str = "policy/1";

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("policy entropy {entropy:.3e} fell below the floor {floor:.3e} at epoch {epoch}")]
    EntropyCollapse {
        epoch: usize,
        entropy: f64,
        floor: f64,
    },
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub success_reward: f64,
    pub per_turn: f64,
    pub failure_penalty: f64,
    pub max_turns: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            success_reward: 80.0,
            per_turn: -1.0,
            failure_penalty: -40.0,
            max_turns: 40,
        }
    }
}

impl RewardSpec {
    pub fn episode_return(&self, turns: usize, success: bool) -> f64 {
        let terminal = if success {
            self.success_reward
        } else {
            self.failure_penalty
        };
        terminal + self.per_turn * turns as f64
    }

    /// Reward of each user turn; the terminal reward lands on the last one.
    pub fn turn_rewards(&self, turns: usize, success: bool) -> Vec<f64> {
        let mut r = vec![self.per_turn; turns];
        if let Some(last) = r.last_mut() {
            *last += self.episode_return(0, success);
        }
        r
    }
}

/// Return under the default reward constants.
pub fn episode_return(turns: usize, success: bool) -> f64 {
    RewardSpec::default().episode_return(turns, success)
}

// ---------------------------------------------------------------------------
// State and action spaces
// ---------------------------------------------------------------------------

const DB_BUCKETS: usize = 4;
const TURN_BUCKETS: usize = 6;

fn db_bucket(n: usize) -> usize {
    match n {
        0 => 0,
        1 => 1,
        2..=4 => 2,
        _ => 3,
    }
}

fn turn_bucket(turn: usize) -> usize {
    match turn {
        0 | 1 => 0,
        2 => 1,
        3..=4 => 2,
        5..=8 => 3,
        9..=16 => 4,
        _ => 5,
    }
}

/// Domain indices follow the order in which the user mentions domains;
/// slot indices are positions in the ontology's slot list of the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyLayout {
    pub l_d: usize,
    pub l_s: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PolicyAction {
    Request { domain: usize, slot: usize },
    Inform { domain: usize, slot: usize },
    Recommend { domain: usize },
    Book { domain: usize },
    NoOffer { domain: usize },
    Reqmore,
    Bye,
}

impl PolicyLayout {
    fn grid(&self) -> usize {
        self.l_d * self.l_s
    }

    /// Offsets: user informs, user requests, user thank/bye, belief,
    /// pending requests, DB buckets, selected, booked, active, turn bucket.
    pub fn state_width(&self) -> usize {
        4 * self.grid() + 2 + DB_BUCKETS * self.l_d + 3 * self.l_d + TURN_BUCKETS
    }

    pub fn n_actions(&self) -> usize {
        2 * self.grid() + 3 * self.l_d + 2
    }

    pub fn action(&self, i: usize) -> Option<PolicyAction> {
        let g = self.grid();
        let cell = |j: usize| (j / self.l_s, j % self.l_s);
        Some(if i < g {
            let (domain, slot) = cell(i);
            PolicyAction::Request { domain, slot }
        } else if i < 2 * g {
            let (domain, slot) = cell(i - g);
            PolicyAction::Inform { domain, slot }
        } else if i < 2 * g + self.l_d {
            PolicyAction::Recommend { domain: i - 2 * g }
        } else if i < 2 * g + 2 * self.l_d {
            PolicyAction::Book {
                domain: i - 2 * g - self.l_d,
            }
        } else if i < 2 * g + 3 * self.l_d {
            PolicyAction::NoOffer {
                domain: i - 2 * g - 2 * self.l_d,
            }
        } else if i == 2 * g + 3 * self.l_d {
            PolicyAction::Reqmore
        } else if i == 2 * g + 3 * self.l_d + 1 {
            PolicyAction::Bye
        } else {
            return None;
        })
    }

    pub fn action_index(&self, action: PolicyAction) -> usize {
        let g = self.grid();
        match action {
            PolicyAction::Request { domain, slot } => domain * self.l_s + slot,
            PolicyAction::Inform { domain, slot } => g + domain * self.l_s + slot,
            PolicyAction::Recommend { domain } => 2 * g + domain,
            PolicyAction::Book { domain } => 2 * g + self.l_d + domain,
            PolicyAction::NoOffer { domain } => 2 * g + 2 * self.l_d + domain,
            PolicyAction::Reqmore => 2 * g + 3 * self.l_d,
            PolicyAction::Bye => 2 * g + 3 * self.l_d + 1,
        }
    }
}

/// What the system knows about the dialogue so far.
#[derive(Clone, Debug)]
pub struct SystemView {
    ontology: Arc<Ontology>,
    db: Arc<EntityDb>,
    pub layout: PolicyLayout,
    /// Domain index → domain name.
    pub domains: Vec<String>,
    pub belief: Belief,
    pub selected: BTreeMap<String, usize>,
    pub booked: BTreeSet<String>,
    /// User requests not yet answered.
    pub pending: BTreeSet<(String, String)>,
    pub last_user: Vec<DialogueAct>,
    /// User turns observed.
    pub turn: usize,
}

impl SystemView {
    pub fn new(ontology: Arc<Ontology>, db: Arc<EntityDb>, layout: PolicyLayout) -> Self {
        Self {
            ontology,
            db,
            layout,
            domains: Vec::new(),
            belief: Belief::new(),
            selected: BTreeMap::new(),
            booked: BTreeSet::new(),
            pending: BTreeSet::new(),
            last_user: Vec::new(),
            turn: 0,
        }
    }

    fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    fn slot_index(&self, domain: &str, slot: &str) -> Option<usize> {
        self.ontology
            .domain(domain)?
            .slot_index(slot)
            .filter(|&s| s < self.layout.l_s)
    }

    fn slot_name(&self, domain: usize, slot: usize) -> Option<&str> {
        let d = self.ontology.domain(self.domains.get(domain)?)?;
        d.slots.get(slot).map(|s| s.name.as_str())
    }

    pub fn matches(&self, domain: &str) -> Vec<usize> {
        let cons = self.belief.get(domain).map(Vec::as_slice).unwrap_or(&[]);
        self.db
            .query(domain, cons.iter().map(|(s, v)| (s.as_str(), v.as_str())))
    }

    pub fn observe_user(&mut self, acts: &[DialogueAct]) {
        self.turn += 1;
        self.last_user = acts.to_vec();
        for act in acts {
            if act.domain == GENERAL {
                continue;
            }
            if self.domain_index(&act.domain).is_none() && self.domains.len() < self.layout.l_d {
                self.domains.push(act.domain.clone());
            }
            let Some(slot) = &act.slot else { continue };
            if act.intent == USER_REQUEST {
                self.pending.insert((act.domain.clone(), slot.clone()));
            } else if act.intent == USER_INFORM {
                let Some(value) = &act.value else { continue };
                let belief = self.belief.entry(act.domain.clone()).or_default();
                belief.retain(|(s, _)| s != slot);
                belief.push((slot.clone(), value.clone()));
            }
        }
        let stale: Vec<String> = self
            .selected
            .iter()
            .filter(|(d, i)| !self.matches(d).contains(i))
            .map(|(d, _)| d.clone())
            .collect();
        for d in stale {
            self.selected.remove(&d);
            self.booked.remove(&d);
        }
    }

    pub fn features(&self) -> Vec<f64> {
        let l = self.layout;
        let g = l.grid();
        let mut x = vec![0.0; l.state_width()];
        let cell = |d: usize, s: usize| d * l.l_s + s;
        for act in &self.last_user {
            if act.domain == GENERAL {
                match act.intent.as_str() {
                    "thank" => x[2 * g] = 1.0,
                    BYE => x[2 * g + 1] = 1.0,
                    _ => {}
                }
                continue;
            }
            let (Some(d), Some(slot)) = (self.domain_index(&act.domain), &act.slot) else {
                continue;
            };
            let Some(s) = self.slot_index(&act.domain, slot) else {
                continue;
            };
            match act.intent.as_str() {
                USER_INFORM => x[cell(d, s)] = 1.0,
                USER_REQUEST => x[g + cell(d, s)] = 1.0,
                _ => {}
            }
        }
        let belief_at = 2 * g + 2;
        let pending_at = belief_at + g;
        let db_at = pending_at + g;
        let sel_at = db_at + DB_BUCKETS * l.l_d;
        let booked_at = sel_at + l.l_d;
        let active_at = booked_at + l.l_d;
        let turn_at = active_at + l.l_d;
        for (d, domain) in self.domains.iter().enumerate() {
            for (slot, _) in self.belief.get(domain).into_iter().flatten() {
                if let Some(s) = self.slot_index(domain, slot) {
                    x[belief_at + cell(d, s)] = 1.0;
                }
            }
            x[db_at + d * DB_BUCKETS + db_bucket(self.matches(domain).len())] = 1.0;
            if self.selected.contains_key(domain) {
                x[sel_at + d] = 1.0;
            }
            if self.booked.contains(domain) {
                x[booked_at + d] = 1.0;
            }
            if self.last_user.iter().any(|a| &a.domain == domain) {
                x[active_at + d] = 1.0;
            }
        }
        for (domain, slot) in &self.pending {
            if let (Some(d), Some(s)) = (self.domain_index(domain), self.slot_index(domain, slot)) {
                x[pending_at + cell(d, s)] = 1.0;
            }
        }
        x[turn_at + turn_bucket(self.turn)] = 1.0;
        x
    }

    /// Actions that can be executed in the current view.
    pub fn mask(&self) -> Vec<bool> {
        let l = self.layout;
        (0..l.n_actions())
            .map(|i| {
                let action = l.action(i).expect("index in range");
                self.is_valid(action)
            })
            .collect()
    }

    fn is_valid(&self, action: PolicyAction) -> bool {
        let spec = |d: usize, s: usize| {
            let domain = self.domains.get(d)?;
            self.ontology.domain(domain)?.slots.get(s)
        };
        let has_match = |d: usize| {
            self.domains
                .get(d)
                .is_some_and(|domain| !self.matches(domain).is_empty())
        };
        match action {
            PolicyAction::Request { domain, slot } => spec(domain, slot).is_some_and(|s| {
                let known = self
                    .belief
                    .get(&self.domains[domain])
                    .is_some_and(|b| b.iter().any(|(k, _)| *k == s.name));
                s.informable() && !known
            }),
            PolicyAction::Inform { domain, slot } => {
                spec(domain, slot).is_some_and(|s| {
                    s.requestable && s.name != ENTITY_SLOT && s.name != BOOKING_SLOT
                }) && has_match(domain)
            }
            PolicyAction::Recommend { domain } => has_match(domain),
            PolicyAction::Book { domain } => {
                has_match(domain)
                    && self
                        .ontology
                        .domain(&self.domains[domain])
                        .is_some_and(|d| d.slot(BOOKING_SLOT).is_some())
            }
            PolicyAction::NoOffer { domain } => domain < self.domains.len(),
            PolicyAction::Reqmore | PolicyAction::Bye => true,
        }
    }

    fn select(&mut self, domain: &str, out: &mut Vec<DialogueAct>) -> Option<usize> {
        if let Some(&i) = self.selected.get(domain) {
            return Some(i);
        }
        let i = *self.matches(domain).first()?;
        self.selected.insert(domain.to_string(), i);
        if let Some(name) = self.db.value(domain, i, ENTITY_SLOT) {
            out.push(DialogueAct::new("recommend", domain, ENTITY_SLOT, name));
            self.pending
                .remove(&(domain.to_string(), ENTITY_SLOT.to_string()));
        }
        Some(i)
    }

    /// Turns an action into concrete acts and updates the view.
    pub fn execute(&mut self, action: PolicyAction) -> Vec<DialogueAct> {
        let mut out = Vec::new();
        let domain_name = |d: usize| self.domains.get(d).cloned();
        match action {
            PolicyAction::Request { domain, slot } => {
                if let (Some(d), Some(s)) = (domain_name(domain), self.slot_name(domain, slot)) {
                    out.push(DialogueAct::new("request", d, s, REQUESTED));
                }
            }
            PolicyAction::Inform { domain, slot } => {
                if let (Some(d), Some(s)) = (
                    domain_name(domain),
                    self.slot_name(domain, slot).map(str::to_string),
                ) {
                    if let Some(i) = self.select(&d, &mut out) {
                        if let Some(v) = self.db.value(&d, i, &s) {
                            out.push(DialogueAct::new("inform", &d, &s, v));
                            self.pending.remove(&(d, s));
                        }
                    }
                }
            }
            PolicyAction::Recommend { domain } => {
                if let Some(d) = domain_name(domain) {
                    let fresh = !self.selected.contains_key(&d);
                    if let Some(i) = self.select(&d, &mut out) {
                        if !fresh {
                            if let Some(name) = self.db.value(&d, i, ENTITY_SLOT) {
                                out.push(DialogueAct::new("recommend", &d, ENTITY_SLOT, name));
                            }
                        }
                    }
                }
            }
            PolicyAction::Book { domain } => {
                if let Some(d) = domain_name(domain) {
                    if let Some(i) = self.select(&d, &mut out) {
                        if let Some(r) = self.db.value(&d, i, BOOKING_SLOT) {
                            out.push(DialogueAct::new("book", &d, BOOKING_SLOT, r));
                            self.booked.insert(d.clone());
                            self.pending.remove(&(d, BOOKING_SLOT.to_string()));
                        }
                    }
                }
            }
            PolicyAction::NoOffer { domain } => {
                if let Some(d) = domain_name(domain) {
                    out.push(match self.belief.get(&d).and_then(|b| b.last()) {
                        Some((slot, value)) => DialogueAct::new("nooffer", &d, slot, value),
                        None => DialogueAct {
                            intent: "nooffer".into(),
                            domain: d,
                            slot: None,
                            value: None,
                        },
                    });
                }
            }
            PolicyAction::Reqmore => out.push(DialogueAct::general("reqmore")),
            PolicyAction::Bye => out.push(DialogueAct::general(BYE)),
        }
        if out.is_empty() {
            out.push(DialogueAct::general("reqmore"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// Two tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParamSet,
    ids: [usize; 6],
}

struct MlpCache {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl Mlp {
    fn new(prefix: &str, dims: [usize; 4], out_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut ids = [0; 6];
        for layer in 0..3 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let w = params.add(format!("{prefix}.w{layer}"), &[fan_in, fan_out]);
            let b = params.add(format!("{prefix}.b{layer}"), &[fan_out]);
            let bound = 1.0 / (fan_in as f64).sqrt() * if layer == 2 { out_scale } else { 1.0 };
            params.fill_uniform(w, bound, rng);
            ids[2 * layer] = w;
            ids[2 * layer + 1] = b;
        }
        Self { params, ids }
    }

    fn from_params(params: ParamSet, prefix: &str) -> Result<Self, NetError> {
        let mut ids = [0; 6];
        for layer in 0..3 {
            for (k, kind) in ["w", "b"].iter().enumerate() {
                let name = format!("{prefix}.{kind}{layer}");
                ids[2 * layer + k] = params
                    .id(&name)
                    .ok_or_else(|| NetError::Format(format!("missing tensor {name}")))?;
            }
        }
        Ok(Self { params, ids })
    }

    fn dense(&self, x: &Array2<f64>, layer: usize) -> Array2<f64> {
        let mut y = x.dot(&self.params.mat(self.ids[2 * layer]));
        y += &self.params.vec(self.ids[2 * layer + 1]);
        y
    }

    fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let h1 = self.dense(&x, 0).mapv(f64::tanh);
        let h2 = self.dense(&h1, 1).mapv(f64::tanh);
        let out = self.dense(&h2, 2);
        (out, MlpCache { x, h1, h2 })
    }

    pub fn forward(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    fn dense_backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        layer: usize,
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let (w, b) = (self.ids[2 * layer], self.ids[2 * layer + 1]);
        grads.mat_mut(w).scaled_add(1.0, &x.t().dot(dy));
        grads.vec_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.params.mat(w).t())
    }

    fn backward(&self, cache: &MlpCache, dout: &Array2<f64>, grads: &mut ParamSet) {
        let mut dh2 = self.dense_backward(&cache.h2, dout, 2, grads);
        dh2.zip_mut_with(&cache.h2, |d, &h| *d *= 1.0 - h * h);
        let mut dh1 = self.dense_backward(&cache.h1, &dh2, 1, grads);
        dh1.zip_mut_with(&cache.h1, |d, &h| *d *= 1.0 - h * h);
        self.dense_backward(&cache.x, &dh1, 0, grads);
    }
}

/// Softmax restricted to the valid actions; invalid entries get 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Policy and value networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub layout: PolicyLayout,
    pub hidden: usize,
    pub actor: Mlp,
    pub critic: Mlp,
}

impl Policy {
    pub fn new(layout: PolicyLayout, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = layout.state_width();
        let actor = Mlp::new(
            "policy",
            [w, hidden, hidden, layout.n_actions()],
            0.01,
            &mut rng,
        );
        let critic = Mlp::new("value", [w, hidden, hidden, 1], 1.0, &mut rng);
        Self {
            layout,
            hidden,
            actor,
            critic,
        }
    }

    /// Action distribution for one state.
    pub fn distribution(&self, state: &[f64], mask: &[bool]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row vector");
        let logits = self.actor.forward(x);
        masked_softmax(logits.row(0).as_slice().expect("contiguous"), mask)
    }

    pub fn value(&self, state: &[f64]) -> f64 {
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row vector");
        self.critic.forward(x)[[0, 0]]
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        ontology_fingerprint: &str,
        extra: serde_json::Value,
    ) -> Result<(), NetError> {
        let meta = serde_json::json!({
            "layout": self.layout,
            "hidden": self.hidden,
            "ontology_fingerprint": ontology_fingerprint,
            "extra": extra,
        });
        let tensors: Vec<(String, Vec<usize>, &[f64])> = [&self.actor.params, &self.critic.params]
            .into_iter()
            .flat_map(|p| {
                p.specs
                    .iter()
                    .map(move |s| (s.name.clone(), s.shape.clone(), &p.data[s.range()]))
            })
            .collect();
        write_container(path, POLICY_SCHEMA, meta, &tensors)
    }

    pub fn load(
        path: impl AsRef<Path>,
        ontology_fingerprint: &str,
    ) -> Result<(Self, serde_json::Value), NetError> {
        let (header, data) = read_container(path, POLICY_SCHEMA)?;
        let meta = &header.meta;
        let found = meta["ontology_fingerprint"].as_str().unwrap_or_default();
        if found != ontology_fingerprint {
            return Err(NetError::Fingerprint {
                expected: ontology_fingerprint.to_string(),
                found: found.to_string(),
            });
        }
        let layout: PolicyLayout = serde_json::from_value(meta["layout"].clone())
            .map_err(|e| NetError::Format(format!("layout: {e}")))?;
        let hidden = meta["hidden"]
            .as_u64()
            .ok_or_else(|| NetError::Format("missing hidden width".into()))?
            as usize;
        let mut actor = ParamSet::new();
        let mut critic = ParamSet::new();
        for (entry, values) in header.tensors.iter().zip(data) {
            let target = if entry.name.starts_with("policy.") {
                &mut actor
            } else {
                &mut critic
            };
            let id = target.add(entry.name.clone(), &entry.shape);
            target.slice_mut(id).copy_from_slice(&values);
        }
        let policy = Self {
            layout,
            hidden,
            actor: Mlp::from_params(actor, "policy")?,
            critic: Mlp::from_params(critic, "value")?,
        };
        let expected = Self::new(layout, hidden, 0);
        let shapes = |m: &Mlp| {
            m.params
                .specs
                .iter()
                .map(|s| s.shape.clone())
                .collect::<Vec<_>>()
        };
        if shapes(&policy.actor) != shapes(&expected.actor)
            || shapes(&policy.critic) != shapes(&expected.critic)
        {
            return Err(NetError::Format(
                "policy tensor shapes do not match the layout".into(),
            ));
        }
        Ok((policy, meta["extra"].clone()))
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// How the agent picks actions.
#[derive(Clone, Debug)]
pub enum Decider {
    Sample(Arc<Policy>),
    Greedy(Arc<Policy>),
    /// Uniform over valid actions.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

/// A system agent driven by a [`Decider`]; records its decisions.
pub struct PolicyAgent {
    ontology: Arc<Ontology>,
    db: Arc<EntityDb>,
    layout: PolicyLayout,
    decider: Decider,
    pub view: SystemView,
    rng: ChaCha8Rng,
    pub trajectory: Vec<Transition>,
}

impl PolicyAgent {
    pub fn new(
        ontology: Arc<Ontology>,
        db: Arc<EntityDb>,
        layout: PolicyLayout,
        decider: Decider,
    ) -> Self {
        let view = SystemView::new(ontology.clone(), db.clone(), layout);
        Self {
            ontology,
            db,
            layout,
            decider,
            view,
            rng: ChaCha8Rng::seed_from_u64(0),
            trajectory: Vec::new(),
        }
    }

    fn choose(&mut self, state: &[f64], mask: &[bool]) -> Transition {
        let (probs, value) = match &self.decider {
            Decider::Sample(p) | Decider::Greedy(p) => {
                (p.distribution(state, mask), p.value(state))
            }
            Decider::Random => {
                let n = mask.iter().filter(|&&m| m).count() as f64;
                (
                    mask.iter()
                        .map(|&m| if m { 1.0 / n } else { 0.0 })
                        .collect(),
                    0.0,
                )
            }
        };
        let action = match self.decider {
            Decider::Greedy(_) => {
                probs
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best })
            }
            _ => {
                let u: f64 = self.rng.gen();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        pick = Some(i);
                        if u < acc {
                            break;
                        }
                    }
                }
                pick.expect("some action is valid")
            }
        };
        Transition {
            state: state.to_vec(),
            mask: mask.to_vec(),
            action,
            log_prob: probs[action].ln(),
            value,
            entropy: entropy(&probs),
        }
    }
}

impl SystemAgent for PolicyAgent {
    fn name(&self) -> &str {
        match self.decider {
            Decider::Random => "random-policy",
            _ => "policy",
        }
    }

    fn start(&mut self, seed: u64) {
        self.view = SystemView::new(self.ontology.clone(), self.db.clone(), self.layout);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.trajectory.clear();
    }

    fn step(&mut self, user_acts: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError> {
        self.view.observe_user(user_acts);
        let state = self.view.features();
        let mask = self.view.mask();
        let t = self.choose(&state, &mask);
        let action = self.layout.action(t.action).expect("index in range");
        self.trajectory.push(t);
        Ok(self.view.execute(action))
    }
}

// ---------------------------------------------------------------------------
// Rollouts and evaluation
// ---------------------------------------------------------------------------

/// Everything a dialogue needs besides the two agents.
#[derive(Clone)]
pub struct PolicyEnv {
    pub ontology: Arc<Ontology>,
    pub db: Arc<EntityDb>,
    pub goal: GoalConfig,
    pub unsat_prob: f64,
    pub reward: RewardSpec,
    pub layout: PolicyLayout,
}

impl PolicyEnv {
    pub fn new(ontology: Arc<Ontology>, db: Arc<EntityDb>) -> Self {
        Self {
            ontology,
            db,
            goal: GoalConfig::default(),
            unsat_prob: 0.05,
            reward: RewardSpec::default(),
            layout: PolicyLayout {
                l_d: crate::goal::DEFAULT_MAX_DOMAINS,
                l_s: crate::goal::DEFAULT_MAX_SLOTS,
            },
        }
    }
}

pub type UserFactory<'a> = dyn Fn() -> Box<dyn UserSimulator> + Sync + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub id: String,
    pub turns: usize,
    pub success: bool,
    /// Sum of the per-turn rewards.
    pub ret: f64,
    /// Domains of the user goal, in goal order.
    pub domains: Vec<String>,
}

struct Episode {
    log: EpisodeLog,
    transitions: Vec<Transition>,
    rewards: Vec<f64>,
}

fn run_episode(
    env: &PolicyEnv,
    make_user: &UserFactory,
    decider: &Decider,
    batch_seed: u64,
    index: usize,
) -> Result<Episode, SimError> {
    let seed = dialogue_seed(batch_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = sample_db_goal(&env.ontology, &env.db, &mut rng, &env.goal, env.unsat_prob)
        .map_err(|e| SimError::User(e.to_string()))?;
    let domains = goal.domain_names().map(str::to_string).collect();
    let mut user = make_user();
    let mut agent = PolicyAgent::new(
        env.ontology.clone(),
        env.db.clone(),
        env.layout,
        decider.clone(),
    );
    let id = format!("ep-{index:06}");
    let outcome = run_dialogue(
        &id,
        &env.ontology,
        &env.db,
        user.as_mut(),
        &mut agent,
        goal,
        rng.next_u64(),
        env.reward.max_turns,
    )?;
    let per_turn = env.reward.turn_rewards(outcome.turns, outcome.success);
    let ret = per_turn.iter().sum();
    // Transition i is charged for user turn i; the last transition takes
    // every remaining turn, terminal reward included.
    let n = agent.trajectory.len();
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        if i + 1 < n {
            rewards.push(per_turn[i]);
        } else {
            rewards.push(per_turn[i..].iter().sum());
        }
    }
    Ok(Episode {
        log: EpisodeLog {
            id,
            turns: outcome.turns,
            success: outcome.success,
            ret,
            domains,
        },
        transitions: agent.trajectory,
        rewards,
    })
}

fn run_episodes(
    env: &PolicyEnv,
    make_user: &UserFactory,
    decider: &Decider,
    batch_seed: u64,
    n: usize,
) -> Result<Vec<Episode>, SimError> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| run_episode(env, make_user, decider, batch_seed, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub success_rate: f64,
    pub avg_turns: f64,
    pub avg_return: f64,
    pub episodes: Vec<EpisodeLog>,
}

impl EvalReport {
    fn from_logs(episodes: Vec<EpisodeLog>) -> Self {
        let n = episodes.len();
        let mean = |f: &dyn Fn(&EpisodeLog) -> f64| {
            if n == 0 {
                0.0
            } else {
                episodes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            n,
            success_rate: mean(&|e| if e.success { 1.0 } else { 0.0 }),
            avg_turns: mean(&|e| e.turns as f64),
            avg_return: mean(&|e| e.ret),
            episodes,
        }
    }
}

/// Runs `n` seeded dialogues with the given decider.
pub fn evaluate_policy(
    env: &PolicyEnv,
    make_user: &UserFactory,
    decider: &Decider,
    n: usize,
    seed: u64,
) -> Result<EvalReport, SimError> {
    let episodes = run_episodes(env, make_user, decider, seed, n)?;
    Ok(EvalReport::from_logs(
        episodes.into_iter().map(|e| e.log).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub epochs: usize,
    pub dialogues_per_epoch: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub update_epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Rewards are multiplied by this before advantage estimation.
    pub reward_scale: f64,
    pub max_grad_norm: f64,
    /// Training aborts when mean rollout entropy drops below this.
    pub entropy_floor: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            dialogues_per_epoch: 200,
            hidden: 128,
            learning_rate: 1e-3,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            update_epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            reward_scale: 0.01,
            max_grad_norm: 0.5,
            entropy_floor: 1e-3,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let fail = |m: &str| Err(RlError::Config(m.to_string()));
        if self.dialogues_per_epoch == 0 || self.minibatch == 0 || self.hidden == 0 {
            return fail("dialogues_per_epoch, minibatch and hidden must be positive");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return fail("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return fail("gamma and lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub success_rate: f64,
    pub avg_turns: f64,
    pub avg_return: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

/// Generalized advantage estimates and value targets of one episode.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero-mean, unit-variance advantages.
pub fn normalize(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - mean) / std;
    }
}

/// Gradient of the clipped surrogate loss with respect to the new log
/// probability. Zero where the clipped branch is active.
pub fn surrogate_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped =
        (advantage >= 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped {
        0.0
    } else {
        -ratio * advantage
    }
}

fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.data.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.data.iter_mut().for_each(|g| *g *= scale);
    }
}

struct Sample {
    state: Vec<f64>,
    mask: Vec<bool>,
    action: usize,
    log_prob: f64,
    advantage: f64,
    ret: f64,
}

struct Trainer {
    policy: Policy,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// One pass over a minibatch; returns (policy loss, value loss, clipped count).
    fn update(&mut self, batch: &[&Sample], config: &PpoConfig) -> (f64, f64, usize) {
        let n = batch.len();
        let width = self.policy.layout.state_width();
        let n_actions = self.policy.layout.n_actions();
        let x = Array2::from_shape_fn((n, width), |(i, j)| batch[i].state[j]);

        let (logits, cache) = self.policy.actor.forward_cached(x.clone());
        let mut dlogits = Array2::zeros((n, n_actions));
        let mut policy_loss = 0.0;
        let mut clipped = 0;
        for (i, s) in batch.iter().enumerate() {
            let p = masked_softmax(logits.row(i).as_slice().expect("contiguous"), &s.mask);
            let logp = p[s.action].ln();
            let ratio = (logp - s.log_prob).exp();
            let unclipped = ratio * s.advantage;
            let bounded = ratio.clamp(1.0 - config.clip, 1.0 + config.clip) * s.advantage;
            let h = entropy(&p);
            policy_loss += -unclipped.min(bounded) - config.entropy_coef * h;
            let g = surrogate_grad(ratio, s.advantage, config.clip);
            if g == 0.0 && s.advantage != 0.0 {
                clipped += 1;
            }
            for a in 0..n_actions {
                if !s.mask[a] {
                    continue;
                }
                let onehot = if a == s.action { 1.0 } else { 0.0 };
                // d(logp)/dz = onehot - p; d(-H)/dz = p (log p + H).
                let d_ent = p[a] * (p[a].ln() + h);
                dlogits[[i, a]] = (g * (onehot - p[a]) + config.entropy_coef * d_ent) / n as f64;
            }
        }
        let mut actor_grads = self.policy.actor.params.zeros_like();
        self.policy
            .actor
            .backward(&cache, &dlogits, &mut actor_grads);
        clip_grad_norm(&mut actor_grads, config.max_grad_norm);
        self.actor_opt.update(
            &mut self.policy.actor.params,
            &actor_grads,
            config.learning_rate,
        );

        let (values, cache) = self.policy.critic.forward_cached(x);
        let mut dv = Array2::zeros((n, 1));
        let mut value_loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let err = values[[i, 0]] - s.ret;
            value_loss += 0.5 * err * err;
            dv[[i, 0]] = config.value_coef * err / n as f64;
        }
        let mut critic_grads = self.policy.critic.params.zeros_like();
        self.policy.critic.backward(&cache, &dv, &mut critic_grads);
        clip_grad_norm(&mut critic_grads, config.max_grad_norm);
        self.critic_opt.update(
            &mut self.policy.critic.params,
            &critic_grads,
            config.learning_rate,
        );
        (policy_loss / n as f64, value_loss / n as f64, clipped)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    dialogue_seed(seed ^ 0x706f_6c69_6379, epoch)
}

/// Trains a policy against the simulator built by `make_user`. Per-epoch
/// statistics come from the sampled training rollouts.
pub fn train_policy(
    env: &PolicyEnv,
    make_user: &UserFactory,
    config: &PpoConfig,
    mut on_epoch: impl FnMut(&PolicyEpochLog, &Policy),
) -> Result<(Policy, Vec<PolicyEpochLog>), RlError> {
    config.validate()?;
    let policy = Policy::new(env.layout, config.hidden, config.seed);
    let mut trainer = Trainer {
        actor_opt: Adam::new(policy.actor.params.len()),
        critic_opt: Adam::new(policy.critic.params.len()),
        policy,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7070_6f5f),
    };
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let decider = Decider::Sample(Arc::new(trainer.policy.clone()));
        let episodes = run_episodes(
            env,
            make_user,
            &decider,
            epoch_seed(config.seed, epoch),
            config.dialogues_per_epoch,
        )?;
        let mut samples = Vec::new();
        let mut entropy_sum = 0.0;
        for ep in &episodes {
            let values: Vec<f64> = ep.transitions.iter().map(|t| t.value).collect();
            let scaled: Vec<f64> = ep.rewards.iter().map(|r| r * config.reward_scale).collect();
            let (adv, ret) = gae(&scaled, &values, config.gamma, config.lambda);
            for ((t, a), r) in ep.transitions.iter().zip(adv).zip(ret) {
                entropy_sum += t.entropy;
                samples.push(Sample {
                    state: t.state.clone(),
                    mask: t.mask.clone(),
                    action: t.action,
                    log_prob: t.log_prob,
                    advantage: a,
                    ret: r,
                });
            }
        }
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
        let report = EvalReport::from_logs(episodes.into_iter().map(|e| e.log).collect());
        let mean_entropy = if samples.is_empty() {
            0.0
        } else {
            entropy_sum / samples.len() as f64
        };

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut pl, mut vl, mut clipped, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for _ in 0..config.update_epochs {
            order.shuffle(&mut trainer.rng);
            for chunk in order.chunks(config.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (p, v, c) = trainer.update(&batch, config);
                pl += p;
                vl += v;
                clipped += c;
                batches += 1;
            }
        }
        let denom = batches.max(1) as f64;
        let log = PolicyEpochLog {
            epoch,
            success_rate: report.success_rate,
            avg_turns: report.avg_turns,
            avg_return: report.avg_return,
            entropy: mean_entropy,
            policy_loss: pl / denom,
            value_loss: vl / denom,
            clip_fraction: clipped as f64 / (samples.len() * config.update_epochs).max(1) as f64,
        };
        for (what, v) in [
            ("success rate", log.success_rate),
            ("policy loss", log.policy_loss),
            ("value loss", log.value_loss),
        ] {
            if !v.is_finite() {
                return Err(RlError::NonFinite {
                    what: what.into(),
                    epoch,
                });
            }
        }
        if !trainer.policy.actor.params.all_finite() || !trainer.policy.critic.params.all_finite() {
            return Err(RlError::NonFinite {
                what: "parameters".into(),
                epoch,
            });
        }
        on_epoch(&log, &trainer.policy);
        let collapsed = !samples.is_empty() && mean_entropy < config.entropy_floor;
        curve.push(log);
        if collapsed {
            return Err(RlError::EntropyCollapse {
                epoch,
                entropy: mean_entropy,
                floor: config.entropy_floor,
            });
        }
    }
    Ok((trainer.policy, curve))
}
