//! Domain-independent per-slot features and the model input sequence.
//!
//! Every slot row is the concatenation
//!
//! ```text
//! user value (4) | system value (4) | type (2) | fulfilled (1) | first (1)
//! | one 3-wide block per domain-specific system intent | general intents (n_gen)
//! | previous user output (6) | domain index (l_d) | slot index (l_s)
//! ```
//!
//! Value one-hots use the order none, `?`, dontcare, other; system intent
//! blocks use none, `?`, other.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goal::{SlotRole, UserGoal};
use crate::ontology::{Ontology, SlotKey, DONTCARE, REQUESTED};
use crate::state::DialogueState;

/// Number of output classes per slot.
pub const N_CLASSES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("domain index overflow: {domain} would exceed l_d = {limit}")]
    DomainOverflow { domain: String, limit: usize },
    #[error("slot index overflow: {key} would exceed l_s = {limit}")]
    SlotOverflow { key: SlotKey, limit: usize },
    #[error("slot {0} has no assigned index")]
    Unindexed(SlotKey),
}

/// What a slot's value is in this turn's user action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputClass {
    None = 0,
    DontCare = 1,
    Request = 2,
    FromGoal = 3,
    FromSystem = 4,
    Random = 5,
}

impl OutputClass {
    pub const ALL: [OutputClass; N_CLASSES] = [
        OutputClass::None,
        OutputClass::DontCare,
        OutputClass::Request,
        OutputClass::FromGoal,
        OutputClass::FromSystem,
        OutputClass::Random,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Sizes and offsets of a feature row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLayout {
    pub n_gen: usize,
    pub n_spec: usize,
    pub l_d: usize,
    pub l_s: usize,
    /// When false the domain/slot index block is omitted entirely.
    pub index_features: bool,
}

impl FeatureLayout {
    pub const USER_VALUE: usize = 0;
    pub const SYS_VALUE: usize = 4;
    pub const TYPE: usize = 8;
    pub const FULFILLED: usize = 10;
    pub const FIRST: usize = 11;
    pub const BASIC_WIDTH: usize = 12;

    pub fn new(n_gen: usize, n_spec: usize, l_d: usize, l_s: usize) -> Self {
        Self {
            n_gen,
            n_spec,
            l_d,
            l_s,
            index_features: true,
        }
    }

    pub fn for_ontology(ontology: &Ontology, l_d: usize, l_s: usize) -> Self {
        Self::new(ontology.n_gen(), ontology.n_spec(), l_d, l_s)
    }

    pub fn with_index_features(mut self, enabled: bool) -> Self {
        self.index_features = enabled;
        self
    }

    pub fn spec_offset(&self, j: usize) -> usize {
        Self::BASIC_WIDTH + 3 * j
    }

    pub fn gen_offset(&self) -> usize {
        Self::BASIC_WIDTH + 3 * self.n_spec
    }

    pub fn user_action_offset(&self) -> usize {
        self.gen_offset() + self.n_gen
    }

    pub fn domain_index_offset(&self) -> usize {
        self.user_action_offset() + N_CLASSES
    }

    pub fn slot_index_offset(&self) -> usize {
        self.domain_index_offset() + self.l_d
    }

    pub fn system_action_width(&self) -> usize {
        3 * self.n_spec + self.n_gen
    }

    pub fn index_width(&self) -> usize {
        if self.index_features {
            self.l_d + self.l_s
        } else {
            0
        }
    }

    /// Per-slot width D.
    pub fn width(&self) -> usize {
        Self::BASIC_WIDTH + self.system_action_width() + N_CLASSES + self.index_width()
    }
}

/// One encoded slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub key: SlotKey,
    pub values: Vec<f64>,
}

impl FeatureRow {
    fn part(&self, start: usize, len: usize) -> &[f64] {
        &self.values[start..start + len]
    }

    pub fn user_value(&self) -> &[f64] {
        self.part(FeatureLayout::USER_VALUE, 4)
    }

    pub fn sys_value(&self) -> &[f64] {
        self.part(FeatureLayout::SYS_VALUE, 4)
    }

    pub fn slot_type(&self) -> &[f64] {
        self.part(FeatureLayout::TYPE, 2)
    }

    pub fn fulfilled(&self) -> f64 {
        self.values[FeatureLayout::FULFILLED]
    }

    pub fn first(&self) -> f64 {
        self.values[FeatureLayout::FIRST]
    }

    pub fn spec(&self, layout: &FeatureLayout, j: usize) -> &[f64] {
        self.part(layout.spec_offset(j), 3)
    }

    pub fn gen(&self, layout: &FeatureLayout) -> &[f64] {
        self.part(layout.gen_offset(), layout.n_gen)
    }

    pub fn user_action(&self, layout: &FeatureLayout) -> &[f64] {
        self.part(layout.user_action_offset(), N_CLASSES)
    }

    pub fn domain_index(&self, layout: &FeatureLayout) -> &[f64] {
        if layout.index_features {
            self.part(layout.domain_index_offset(), layout.l_d)
        } else {
            &[]
        }
    }

    pub fn slot_index(&self, layout: &FeatureLayout) -> &[f64] {
        if layout.index_features {
            self.part(layout.slot_index_offset(), layout.l_s)
        } else {
            &[]
        }
    }
}

/// Per-dialogue domain and slot indices, assigned in goal order and extended
/// as the system introduces new slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    l_d: usize,
    l_s: usize,
    domains: Vec<String>,
    slots: BTreeMap<String, Vec<String>>,
}

impl IndexMap {
    pub fn empty(l_d: usize, l_s: usize) -> Self {
        Self {
            l_d,
            l_s,
            domains: Vec::new(),
            slots: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &SlotKey) -> Option<(usize, usize)> {
        let d = self.domains.iter().position(|d| *d == key.domain)?;
        let s = self
            .slots
            .get(&key.domain)?
            .iter()
            .position(|s| *s == key.slot)?;
        Some((d, s))
    }

    pub fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    /// Returns the existing index or assigns the next free one.
    pub fn assign(&mut self, key: &SlotKey) -> Result<(usize, usize), EncodeError> {
        if let Some(found) = self.get(key) {
            return Ok(found);
        }
        let d = match self.domain_index(&key.domain) {
            Some(d) => d,
            None => {
                if self.domains.len() >= self.l_d {
                    return Err(EncodeError::DomainOverflow {
                        domain: key.domain.clone(),
                        limit: self.l_d,
                    });
                }
                self.domains.push(key.domain.clone());
                self.domains.len() - 1
            }
        };
        let slots = self.slots.entry(key.domain.clone()).or_default();
        if slots.len() >= self.l_s {
            return Err(EncodeError::SlotOverflow {
                key: key.clone(),
                limit: self.l_s,
            });
        }
        slots.push(key.slot.clone());
        Ok((d, slots.len() - 1))
    }
}

/// Assigns indices following the goal's domain and slot order.
pub fn assign_indices(goal: &UserGoal, l_d: usize, l_s: usize) -> Result<IndexMap, EncodeError> {
    let mut map = IndexMap::empty(l_d, l_s);
    for key in goal.slot_keys() {
        map.assign(&key)?;
    }
    Ok(map)
}

/// The dialogue's slot list S^t.
///
/// The base order is a permutation of the goal slots followed by
/// system-introduced slots in order of introduction. Slots the user has
/// already mentioned move to the front, in order of first user mention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotList {
    base: Vec<SlotKey>,
}

impl SlotList {
    /// Goal slots in goal order.
    pub fn in_goal_order(goal: &UserGoal) -> Self {
        Self {
            base: goal.slot_keys(),
        }
    }

    /// Goal slots in a uniformly random order.
    pub fn shuffled<R: Rng + ?Sized>(goal: &UserGoal, rng: &mut R) -> Self {
        let mut base = goal.slot_keys();
        base.shuffle(rng);
        Self { base }
    }

    pub fn from_order(base: Vec<SlotKey>) -> Self {
        Self { base }
    }

    pub fn contains(&self, key: &SlotKey) -> bool {
        self.base.contains(key)
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Appends slots mentioned in the current system turn and assigns their
    /// indices.
    pub fn observe_system_turn(
        &mut self,
        state: &DialogueState,
        index: &mut IndexMap,
    ) -> Result<(), EncodeError> {
        for act in state.last_system_acts() {
            if let Some(key) = act.key() {
                index.assign(&key)?;
                if !self.base.contains(&key) {
                    self.base.push(key);
                }
            }
        }
        Ok(())
    }

    /// S^t for the state's current turn.
    pub fn current(&self, state: &DialogueState) -> Vec<SlotKey> {
        let turn = state.current_turn();
        let mut mentioned: Vec<SlotKey> = Vec::new();
        for record in state.history.iter().take(turn) {
            for act in &record.user {
                if let Some(key) = act.key() {
                    if self.base.contains(&key) && !mentioned.contains(&key) {
                        mentioned.push(key);
                    }
                }
            }
        }
        let seen: BTreeSet<&SlotKey> = mentioned.iter().collect();
        let rest: Vec<SlotKey> = self
            .base
            .iter()
            .filter(|k| !seen.contains(k))
            .cloned()
            .collect();
        mentioned.extend(rest);
        mentioned
    }
}

fn value_one_hot(value: Option<&str>) -> [f64; 4] {
    match value {
        None => [1.0, 0.0, 0.0, 0.0],
        Some(REQUESTED) => [0.0, 1.0, 0.0, 0.0],
        Some(DONTCARE) => [0.0, 0.0, 1.0, 0.0],
        Some(_) => [0.0, 0.0, 0.0, 1.0],
    }
}

/// Encodes one slot of the current turn. `goal` flags must be fresh
/// (see [`crate::state::mark_fulfilled`]).
pub fn encode_slot(
    key: &SlotKey,
    goal: &UserGoal,
    state: &DialogueState,
    index: &IndexMap,
    layout: &FeatureLayout,
    ontology: &Ontology,
) -> Result<FeatureRow, EncodeError> {
    let mut v = vec![0.0; layout.width()];

    let user_value = match goal.role(key) {
        Some(_) => goal.value(key),
        None => None,
    };
    v[FeatureLayout::USER_VALUE..FeatureLayout::USER_VALUE + 4]
        .copy_from_slice(&value_one_hot(user_value));
    v[FeatureLayout::SYS_VALUE..FeatureLayout::SYS_VALUE + 4]
        .copy_from_slice(&value_one_hot(state.system_value(key)));
    match goal.role(key) {
        Some(SlotRole::Constraint) => v[FeatureLayout::TYPE] = 1.0,
        Some(SlotRole::Request) => v[FeatureLayout::TYPE + 1] = 1.0,
        None => {}
    }
    if goal.is_fulfilled(key) {
        v[FeatureLayout::FULFILLED] = 1.0;
    }
    if state.first_mentioned_now(key) {
        v[FeatureLayout::FIRST] = 1.0;
    }

    // Domain-specific system intents: none / ? / other per intent.
    let mut spec = vec![0usize; layout.n_spec];
    for act in state.last_system_acts() {
        if act.is_general() || act.domain != key.domain {
            continue;
        }
        let Some(j) = ontology.spec_intent_index(&act.intent) else {
            continue;
        };
        if j >= layout.n_spec {
            continue;
        }
        let code = match act.slot.as_deref() {
            Some(slot) if slot == key.slot => match act.value.as_deref() {
                None | Some(REQUESTED) => 1,
                Some(_) => 2,
            },
            Some(_) => continue,
            // A slot-less act addresses the whole domain.
            None => 2,
        };
        spec[j] = spec[j].max(code);
    }
    for (j, code) in spec.iter().enumerate() {
        v[layout.spec_offset(j) + code] = 1.0;
    }
    for act in state.last_system_acts().iter().filter(|a| a.is_general()) {
        if let Some(k) = ontology.general_intent_index(&act.intent) {
            if k < layout.n_gen {
                v[layout.gen_offset() + k] = 1.0;
            }
        }
    }
    if let Some(&class) = state.prev_output.get(key) {
        v[layout.user_action_offset() + class] = 1.0;
    }
    if layout.index_features {
        let (d, s) = index
            .get(key)
            .ok_or_else(|| EncodeError::Unindexed(key.clone()))?;
        v[layout.domain_index_offset() + d] = 1.0;
        v[layout.slot_index_offset() + s] = 1.0;
    }
    Ok(FeatureRow {
        key: key.clone(),
        values: v,
    })
}

/// The encoded slot list of one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnBlock {
    pub turn: usize,
    pub rows: Vec<FeatureRow>,
}

impl TurnBlock {
    pub fn slots(&self) -> impl Iterator<Item = &SlotKey> {
        self.rows.iter().map(|r| &r.key)
    }
}

/// Encodes `slots` for the state's current turn.
pub fn encode_turn(
    slots: &[SlotKey],
    goal: &UserGoal,
    state: &DialogueState,
    index: &IndexMap,
    layout: &FeatureLayout,
    ontology: &Ontology,
) -> Result<TurnBlock, EncodeError> {
    let rows = slots
        .iter()
        .map(|k| encode_slot(k, goal, state, index, layout, ontology))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TurnBlock {
        turn: state.current_turn(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Cls,
    Sep,
    Slot,
}

/// `[CLS, turn t rows, SEP, turn t-1 rows, SEP, ...]`. Special rows carry
/// zero features; the network substitutes trained embeddings for them.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub width: usize,
    pub kinds: Vec<RowKind>,
    /// Row-major `kinds.len() × width` feature matrix.
    pub features: Vec<f64>,
    /// Row positions of the current turn's slots, aligned with `slots`.
    pub current: Vec<usize>,
    pub slots: Vec<SlotKey>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn n_current(&self) -> usize {
        self.current.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// Default history window: the current turn plus two previous turns.
pub const DEFAULT_WINDOW: usize = 3;

/// Builds the model input from encoded turn blocks (oldest first, the last
/// one being the current turn), keeping at most `window` turns.
pub fn build_input(blocks: &[&TurnBlock], window: usize, width: usize) -> InputSequence {
    let window = window.max(1);
    let mut kinds = vec![RowKind::Cls];
    let mut features = vec![0.0; width];
    let mut current = Vec::new();
    let mut slots = Vec::new();
    for (age, block) in blocks.iter().rev().take(window).enumerate() {
        for row in &block.rows {
            debug_assert_eq!(row.values.len(), width);
            if age == 0 {
                current.push(kinds.len());
                slots.push(row.key.clone());
            }
            kinds.push(RowKind::Slot);
            features.extend_from_slice(&row.values);
        }
        kinds.push(RowKind::Sep);
        features.extend(std::iter::repeat_n(0.0, width));
    }
    InputSequence {
        width,
        kinds,
        features,
        current,
        slots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::DomainGoal;
    use crate::state::mark_fulfilled;
    use crate::DialogueAct;

    #[test]
    fn default_width_is_66() {
        let layout = FeatureLayout::new(5, 9, 6, 10);
        assert_eq!(layout.width(), 12 + 32 + 6 + 16);
        assert_eq!(layout.width(), 66);
        assert_eq!(layout.with_index_features(false).width(), 50);
    }

    fn two_domain_goal() -> UserGoal {
        UserGoal::new(vec![
            DomainGoal {
                domain: "lodging".into(),
                constraints: vec![("area".into(), "north".into())],
                requests: vec!["name".into()],
            },
            DomainGoal {
                domain: "eatery".into(),
                constraints: vec![("food".into(), "italian".into())],
                requests: vec!["phone".into()],
            },
        ])
    }

    #[test]
    fn indices_follow_goal_order() {
        let g = two_domain_goal();
        let map = assign_indices(&g, 6, 10).unwrap();
        assert_eq!(map.get(&SlotKey::new("lodging", "area")), Some((0, 0)));
        assert_eq!(map.get(&SlotKey::new("lodging", "name")), Some((0, 1)));
        assert_eq!(map.get(&SlotKey::new("eatery", "phone")), Some((1, 1)));
        let mut swapped = g.clone();
        swapped.domains.swap(0, 1);
        let map2 = assign_indices(&swapped, 6, 10).unwrap();
        assert_eq!(map2.get(&SlotKey::new("lodging", "area")), Some((1, 0)));
        assert_eq!(map2.get(&SlotKey::new("eatery", "food")), Some((0, 0)));
    }

    #[test]
    fn single_slot_goal_gets_origin() {
        let g = UserGoal::new(vec![DomainGoal {
            domain: "eatery".into(),
            constraints: vec![("food".into(), "indian".into())],
            requests: vec![],
        }]);
        let map = assign_indices(&g, 6, 10).unwrap();
        assert_eq!(map.get(&SlotKey::new("eatery", "food")), Some((0, 0)));
    }

    #[test]
    fn index_overflow_is_reported() {
        let mut map = IndexMap::empty(1, 2);
        map.assign(&SlotKey::new("a", "x")).unwrap();
        map.assign(&SlotKey::new("a", "y")).unwrap();
        assert!(matches!(
            map.assign(&SlotKey::new("a", "z")),
            Err(EncodeError::SlotOverflow { .. })
        ));
        assert!(matches!(
            map.assign(&SlotKey::new("b", "x")),
            Err(EncodeError::DomainOverflow { .. })
        ));
    }

    #[test]
    fn empty_history_row() {
        let o = Ontology::toy();
        let layout = FeatureLayout::for_ontology(&o, 6, 10);
        let mut g = two_domain_goal();
        let mut s = DialogueState::new();
        s.apply_system_acts(&o, &[]).unwrap();
        mark_fulfilled(&mut g, &s);
        let map = assign_indices(&g, 6, 10).unwrap();
        let key = SlotKey::new("lodging", "area");
        let row = encode_slot(&key, &g, &s, &map, &layout, &o).unwrap();
        assert_eq!(row.values.len(), 66);
        assert_eq!(row.sys_value(), &[1.0, 0.0, 0.0, 0.0]);
        for j in 0..layout.n_spec {
            assert_eq!(row.spec(&layout, j), &[1.0, 0.0, 0.0]);
        }
        assert!(row.gen(&layout).iter().all(|&x| x == 0.0));
        assert!(row.user_action(&layout).iter().all(|&x| x == 0.0));
        assert_eq!(row.user_value(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(row.slot_type(), &[1.0, 0.0]);
    }

    #[test]
    fn sequence_length_and_alignment() {
        let o = Ontology::toy();
        let layout = FeatureLayout::for_ontology(&o, 6, 10);
        let mut g = two_domain_goal();
        let mut s = DialogueState::new();
        s.apply_system_acts(&o, &[]).unwrap();
        mark_fulfilled(&mut g, &s);
        let map = assign_indices(&g, 6, 10).unwrap();
        let list = SlotList::in_goal_order(&g);
        let slots = list.current(&s);
        let block = encode_turn(&slots, &g, &s, &map, &layout, &o).unwrap();
        let seq = build_input(&[&block], 3, layout.width());
        assert_eq!(seq.len(), 4 + 2);
        assert_eq!(seq.kinds[0], RowKind::Cls);
        assert_eq!(*seq.kinds.last().unwrap(), RowKind::Sep);
        assert_eq!(seq.current, vec![1, 2, 3, 4]);
        assert_eq!(seq.slots, slots);

        // Permuting the slot list permutes rows and alignment identically.
        let mut reversed = slots.clone();
        reversed.reverse();
        let block_r = encode_turn(&reversed, &g, &s, &map, &layout, &o).unwrap();
        let seq_r = build_input(&[&block_r], 3, layout.width());
        assert_eq!(seq_r.slots, reversed);
        for (i, key) in seq_r.slots.iter().enumerate() {
            let j = seq.slots.iter().position(|k| k == key).unwrap();
            assert_eq!(seq_r.row(seq_r.current[i]), seq.row(seq.current[j]));
        }
    }

    #[test]
    fn window_limits_history() {
        let o = Ontology::toy();
        let layout = FeatureLayout::for_ontology(&o, 6, 10);
        let mut g = two_domain_goal();
        let mut s = DialogueState::new();
        let map = assign_indices(&g, 6, 10).unwrap();
        let list = SlotList::in_goal_order(&g);
        let mut blocks = Vec::new();
        for _ in 0..5 {
            s.apply_system_acts(&o, &[DialogueAct::general("reqmore")])
                .unwrap();
            mark_fulfilled(&mut g, &s);
            blocks.push(encode_turn(&list.current(&s), &g, &s, &map, &layout, &o).unwrap());
            s.record_user_acts(&o, &[], Default::default()).unwrap();
        }
        let refs: Vec<&TurnBlock> = blocks.iter().collect();
        assert_eq!(build_input(&refs, 3, layout.width()).len(), 1 + 3 * 5);
        assert_eq!(build_input(&refs, 1, layout.width()).len(), 1 + 5);
        assert_eq!(build_input(&refs[..1], 3, layout.width()).len(), 1 + 5);
    }
}
