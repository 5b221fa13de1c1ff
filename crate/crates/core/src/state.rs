//! Per-dialogue state: system state, act history and previous user outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::act::{ActError, DialogueAct, Speaker};
use crate::goal::{SlotRole, UserGoal};
use crate::ontology::{Ontology, SlotKey, REQUESTED, USER_INFORM};

/// System intents that present an entity and therefore use the user's
/// constraints.
pub const OFFER_INTENTS: [&str; 6] = [
    "recommend",
    "inform",
    "select",
    "book",
    "offerbook",
    "offerbooked",
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub system: Vec<DialogueAct>,
    pub user: Vec<DialogueAct>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    /// Number of system turns applied so far; equals `history.len()`.
    pub t: usize,
    pub system_state: BTreeMap<SlotKey, String>,
    pub history: Vec<TurnRecord>,
    /// Output class of each slot in the previous user turn.
    pub prev_output: BTreeMap<SlotKey, usize>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of the turn currently being answered by the user.
    pub fn current_turn(&self) -> usize {
        self.t.saturating_sub(1)
    }

    /// Applies one system turn. All acts are validated before anything
    /// changes; a rejected list leaves the state untouched.
    pub fn apply_system_acts(
        &mut self,
        ontology: &Ontology,
        acts: &[DialogueAct],
    ) -> Result<(), ActError> {
        ontology.validate_acts(acts, Speaker::System)?;
        for act in acts {
            let Some(key) = act.key() else { continue };
            if act.intent == "request" {
                self.system_state.insert(key, REQUESTED.to_string());
            } else if let Some(value) = &act.value {
                self.system_state.insert(key, value.clone());
            }
        }
        self.history.push(TurnRecord {
            system: acts.to_vec(),
            user: Vec::new(),
        });
        self.t += 1;
        Ok(())
    }

    /// Records the user's reply to the current system turn together with the
    /// per-slot output classes that produced it.
    pub fn record_user_acts(
        &mut self,
        ontology: &Ontology,
        acts: &[DialogueAct],
        outputs: BTreeMap<SlotKey, usize>,
    ) -> Result<(), ActError> {
        ontology.validate_acts(acts, Speaker::User)?;
        let turn = self
            .history
            .last_mut()
            .expect("a system turn precedes every user turn");
        turn.user = acts.to_vec();
        self.prev_output = outputs;
        Ok(())
    }

    pub fn system_value(&self, key: &SlotKey) -> Option<&str> {
        self.system_state.get(key).map(String::as_str)
    }

    pub fn last_system_acts(&self) -> &[DialogueAct] {
        self.history
            .last()
            .map(|t| t.system.as_slice())
            .unwrap_or(&[])
    }

    /// First mention of a slot by either speaker, as an event index:
    /// system acts of turn τ are event 2τ and user acts of turn τ are 2τ+1.
    pub fn first_mention_event(&self, key: &SlotKey) -> Option<usize> {
        let mentions = |acts: &[DialogueAct]| {
            acts.iter()
                .any(|a| a.domain == key.domain && a.slot.as_deref() == Some(key.slot.as_str()))
        };
        self.history.iter().enumerate().find_map(|(tau, turn)| {
            if mentions(&turn.system) {
                Some(2 * tau)
            } else if mentions(&turn.user) {
                Some(2 * tau + 1)
            } else {
                None
            }
        })
    }

    /// True iff the slot's first mention happened since the previous user
    /// input was built: in the last user turn or in the current system turn.
    pub fn first_mentioned_now(&self, key: &SlotKey) -> bool {
        let Some(event) = self.first_mention_event(key) else {
            return false;
        };
        let now = 2 * self.current_turn();
        self.t > 0 && (event == now || event + 1 == now)
    }
}

/// Recomputes fulfilment flags and first-mention turns from the history.
///
/// A constraint is fulfilled once the user has informed its current value and
/// the system afterwards either asserted that value or offered an entity of
/// the domain without contradicting it. A request is fulfilled once the
/// system state holds a concrete value for it.
pub fn mark_fulfilled(goal: &mut UserGoal, state: &DialogueState) {
    for key in goal.slot_keys() {
        let fulfilled = match goal.role(&key) {
            Some(SlotRole::Request) => state.system_value(&key).is_some_and(|v| v != REQUESTED),
            Some(SlotRole::Constraint) => {
                let value = goal.value(&key).unwrap_or_default().to_string();
                constraint_fulfilled(&key, &value, state)
            }
            None => false,
        };
        let first = state.first_mention_event(&key).map(|e| e / 2);
        let flags = goal.flags.entry(key).or_default();
        flags.fulfilled = fulfilled;
        flags.first_mentioned_turn = first;
    }
}

fn constraint_fulfilled(key: &SlotKey, value: &str, state: &DialogueState) -> bool {
    let informed_at = state.history.iter().rposition(|turn| {
        turn.user.iter().any(|a| {
            a.intent == USER_INFORM
                && a.domain == key.domain
                && a.slot.as_deref() == Some(key.slot.as_str())
                && a.value.as_deref() == Some(value)
        })
    });
    let Some(informed_at) = informed_at else {
        return false;
    };
    let mut asserted: Option<&str> = None;
    let mut offered = false;
    for turn in &state.history[informed_at + 1..] {
        for act in &turn.system {
            if act.domain != key.domain {
                continue;
            }
            if act.slot.as_deref() == Some(key.slot.as_str()) {
                match act.value.as_deref() {
                    Some(REQUESTED) | None => asserted = None,
                    Some(v) if act.intent != "request" => asserted = Some(v),
                    Some(_) => {}
                }
            }
            if OFFER_INTENTS.contains(&act.intent.as_str()) {
                offered = true;
            }
        }
    }
    match asserted {
        Some(v) => v == value || v == crate::ontology::DONTCARE,
        None => offered,
    }
}
