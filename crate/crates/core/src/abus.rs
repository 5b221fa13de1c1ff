//! Agenda-based user simulator.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::act::DialogueAct;
use crate::goal::{SlotRole, UserGoal};
use crate::ontology::{Ontology, SlotKey, DONTCARE, GENERAL, REQUESTED, USER_INFORM, USER_REQUEST};
use crate::sim::{is_bye, SimError, UserSimulator, UserTurn, BYE};

/// Intents through which the system asserts slot values.
const ASSERTING: [&str; 6] = [
    "inform",
    "recommend",
    "select",
    "book",
    "offerbook",
    "offerbooked",
];

/// Stack of pending user acts; the top is the end of the vector.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Agenda {
    stack: Vec<DialogueAct>,
}

impl Agenda {
    /// Initial agenda: per goal domain, its constraints above its requests,
    /// with the first domain on top. Requests surface after the constraints.
    pub fn from_goal(goal: &UserGoal) -> Self {
        let mut stack = Vec::new();
        for d in goal.domains.iter().rev() {
            for slot in d.requests.iter().rev() {
                stack.push(DialogueAct::request(&SlotKey::new(&d.domain, slot)));
            }
            for (slot, value) in d.constraints.iter().rev() {
                stack.push(DialogueAct::inform(
                    &SlotKey::new(&d.domain, slot),
                    value.clone(),
                ));
            }
        }
        Self { stack }
    }

    pub fn push(&mut self, act: DialogueAct) {
        self.stack.retain(|a| a != &act);
        self.stack.push(act);
    }

    pub fn pop(&mut self) -> Option<DialogueAct> {
        self.stack.pop()
    }

    pub fn remove_where(&mut self, f: impl Fn(&DialogueAct) -> bool) {
        self.stack.retain(|a| !f(a));
    }

    pub fn contains(&self, act: &DialogueAct) -> bool {
        self.stack.contains(act)
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    /// Top first.
    pub fn iter(&self) -> impl Iterator<Item = &DialogueAct> {
        self.stack.iter().rev()
    }
}

pub struct AgendaUser {
    ontology: Arc<Ontology>,
    goal: UserGoal,
    agenda: Agenda,
    rng: ChaCha8Rng,
    /// Goal requests the system has answered.
    answered: Vec<SlotKey>,
    /// Constraints in the order the user last informed them.
    informed: Vec<SlotKey>,
    pub max_pop: usize,
    done: bool,
}

impl AgendaUser {
    pub fn new(ontology: Arc<Ontology>) -> Self {
        Self {
            ontology,
            goal: UserGoal::default(),
            agenda: Agenda::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
            answered: Vec::new(),
            informed: Vec::new(),
            max_pop: 3,
            done: false,
        }
    }

    pub fn agenda(&self) -> &Agenda {
        &self.agenda
    }

    fn goal_inform(&self, key: &SlotKey) -> Option<DialogueAct> {
        self.goal
            .constraint_value(key)
            .map(|v| DialogueAct::inform(key, v.to_string()))
    }

    /// Replaces the most recently informed constraint of `domain` (or `hint`
    /// if it is a constraint) with a different random value.
    fn relax(&mut self, domain: &str, hint: Option<&SlotKey>) {
        let target = hint
            .filter(|k| self.goal.role(k) == Some(SlotRole::Constraint))
            .cloned()
            .or_else(|| {
                self.informed
                    .iter()
                    .rev()
                    .find(|k| k.domain == domain)
                    .cloned()
            })
            .or_else(|| {
                self.goal
                    .constraints()
                    .map(|(k, _)| k)
                    .find(|k| k.domain == domain)
            });
        let Some(key) = target else { return };
        let Some(spec) = self.ontology.slot(&key) else {
            return;
        };
        let current = self
            .goal
            .constraint_value(&key)
            .unwrap_or_default()
            .to_string();
        let choices: Vec<&String> = spec.values.iter().filter(|v| **v != current).collect();
        let Some(value) = choices.choose(&mut self.rng).map(|v| (*v).clone()) else {
            return;
        };
        self.goal
            .change_value(&key, &value)
            .expect("relaxed slot is a goal constraint");
        self.agenda
            .remove_where(|a| a.intent == USER_INFORM && a.key().as_ref() == Some(&key));
        self.agenda.push(DialogueAct::inform(&key, value));
    }

    fn absorb(&mut self, system_acts: &[DialogueAct]) {
        for act in system_acts {
            if act.domain == GENERAL {
                continue;
            }
            let key = act.key();
            match act.intent.as_str() {
                "request" => {
                    let Some(key) = key else { continue };
                    let reply = self
                        .goal_inform(&key)
                        .unwrap_or_else(|| DialogueAct::inform(&key, DONTCARE.to_string()));
                    if self.ontology.slot(&key).is_some_and(|s| s.informable()) {
                        self.agenda.push(reply);
                    }
                }
                "nooffer" => self.relax(&act.domain, key.as_ref()),
                intent if ASSERTING.contains(&intent) => {
                    let (Some(key), Some(value)) = (key, act.value.as_deref()) else {
                        continue;
                    };
                    match self.goal.role(&key) {
                        Some(SlotRole::Request) if value != REQUESTED => {
                            if !self.answered.contains(&key) {
                                self.answered.push(key.clone());
                            }
                            self.agenda.remove_where(|a| {
                                a.intent == USER_REQUEST && a.key().as_ref() == Some(&key)
                            });
                        }
                        Some(SlotRole::Constraint) => {
                            let goal_value = self.goal.constraint_value(&key).unwrap_or_default();
                            if value != goal_value && value != DONTCARE {
                                let fix = DialogueAct::inform(&key, goal_value.to_string());
                                self.agenda.push(fix);
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
    }

    fn unanswered_requests(&self) -> Vec<SlotKey> {
        self.goal
            .requests()
            .filter(|k| !self.answered.contains(k))
            .collect()
    }
}

impl UserSimulator for AgendaUser {
    fn name(&self) -> &str {
        "abus"
    }

    fn start(&mut self, goal: UserGoal, seed: u64) -> Result<(), SimError> {
        self.agenda = Agenda::from_goal(&goal);
        self.goal = goal;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.answered.clear();
        self.informed.clear();
        self.done = false;
        Ok(())
    }

    fn step(&mut self, system_acts: &[DialogueAct]) -> Result<UserTurn, SimError> {
        if self.done {
            return Ok(UserTurn {
                acts: vec![DialogueAct::general(BYE)],
                done: true,
            });
        }
        if is_bye(system_acts) {
            self.done = true;
            return Ok(UserTurn {
                acts: vec![DialogueAct::general(BYE)],
                done: true,
            });
        }
        self.absorb(system_acts);
        if self.agenda.is_empty() {
            // Requests emitted earlier but never answered go back on the
            // agenda; with nothing left the user leaves.
            for key in self.unanswered_requests().into_iter().rev() {
                self.agenda.push(DialogueAct::request(&key));
            }
        }
        if self.agenda.is_empty() {
            self.done = true;
            return Ok(UserTurn {
                acts: vec![DialogueAct::general(BYE)],
                done: true,
            });
        }
        let n = self.rng.gen_range(1..=self.max_pop.max(1));
        let mut acts: Vec<DialogueAct> = Vec::with_capacity(n);
        while acts.len() < n {
            let Some(act) = self.agenda.pop() else { break };
            if act.intent == USER_REQUEST && act.key().is_some_and(|k| self.answered.contains(&k)) {
                continue;
            }
            if let Some(key) = act.key() {
                if act.intent == USER_INFORM && self.goal.role(&key) == Some(SlotRole::Constraint) {
                    self.informed.retain(|k| k != &key);
                    self.informed.push(key);
                }
            }
            if !acts.contains(&act) {
                acts.push(act);
            }
        }
        if acts.is_empty() {
            self.done = true;
            return Ok(UserTurn {
                acts: vec![DialogueAct::general(BYE)],
                done: true,
            });
        }
        Ok(UserTurn { acts, done: false })
    }

    fn goal(&self) -> &UserGoal {
        &self.goal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::DomainGoal;

    fn goal() -> UserGoal {
        UserGoal::new(vec![DomainGoal {
            domain: "lodging".into(),
            constraints: vec![
                ("area".into(), "north".into()),
                ("stars".into(), "4".into()),
            ],
            requests: vec!["name".into()],
        }])
    }

    #[test]
    fn empty_agenda_says_bye() {
        let mut user = AgendaUser::new(Arc::new(Ontology::toy()));
        user.start(UserGoal::default(), 1).unwrap();
        let turn = user.step(&[]).unwrap();
        assert!(turn.done);
        assert_eq!(turn.acts, vec![DialogueAct::general(BYE)]);
    }

    #[test]
    fn constraints_sit_above_requests() {
        let agenda = Agenda::from_goal(&goal());
        let order: Vec<&str> = agenda.iter().map(|a| a.intent.as_str()).collect();
        assert_eq!(order, ["inform", "inform", "request"]);
        assert_eq!(agenda.iter().next().unwrap().slot.as_deref(), Some("area"));
    }

    #[test]
    fn system_request_pushes_goal_value() {
        let mut user = AgendaUser::new(Arc::new(Ontology::toy()));
        let mut goal = goal();
        goal.domains[0].constraints.reverse();
        user.start(goal, 5).unwrap();
        user.max_pop = 1;
        user.step(&[]).unwrap();
        let turn = user
            .step(&[DialogueAct::new("request", "lodging", "area", "?")])
            .unwrap();
        let area = SlotKey::new("lodging", "area");
        assert!(turn.acts.contains(&DialogueAct::inform(&area, "north")));
    }

    #[test]
    fn answered_requests_leave_the_agenda() {
        let mut user = AgendaUser::new(Arc::new(Ontology::toy()));
        user.start(goal(), 5).unwrap();
        user.step(&[]).unwrap();
        user.step(&[DialogueAct::new(
            "recommend",
            "lodging",
            "name",
            "lodging-1",
        )])
        .unwrap();
        let name = SlotKey::new("lodging", "name");
        assert!(!user.agenda().contains(&DialogueAct::request(&name)));
    }

    #[test]
    fn nooffer_changes_the_goal() {
        let mut user = AgendaUser::new(Arc::new(Ontology::toy()));
        user.start(goal(), 5).unwrap();
        user.max_pop = 3;
        user.step(&[]).unwrap();
        let turn = user
            .step(&[DialogueAct::new("nooffer", "lodging", "stars", "4")])
            .unwrap();
        let stars = SlotKey::new("lodging", "stars");
        let new = user.goal().constraint_value(&stars).unwrap().to_string();
        assert_ne!(new, "4");
        assert!(turn.acts.contains(&DialogueAct::inform(&stars, new)));
    }

    #[test]
    fn first_turn_pops_one_to_three() {
        let mut big = goal();
        big.domains[0]
            .constraints
            .push(("pricerange".into(), "cheap".into()));
        big.domains[0].requests.push("ref".into());
        let mut total = 0usize;
        let mut seen = [false; 4];
        for seed in 0..1000 {
            let mut user = AgendaUser::new(Arc::new(Ontology::toy()));
            user.start(big.clone(), seed).unwrap();
            let n = user.step(&[]).unwrap().acts.len();
            assert!((1..=3).contains(&n));
            seen[n] = true;
            total += n;
        }
        let mean = total as f64 / 1000.0;
        assert!((1.0..=3.0).contains(&mean));
        assert!(seen[1] && seen[2] && seen[3]);
    }
}
