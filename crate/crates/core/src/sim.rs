//! Dialogue harness pairing a user simulator with a system agent, and the
//! success judge shared by every evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abus::AgendaUser;
use crate::act::{ActError, DialogueAct, Speaker};
use crate::corpus::{Corpus, CorpusDialogue, CorpusTurn};
use crate::db::{sample_db_goal, EntityDb};
use crate::goal::{GoalConfig, UserGoal};
use crate::ontology::{Ontology, DONTCARE, ENTITY_SLOT, GENERAL, REQUESTED};
use crate::rules::RuleSystemAgent;
use crate::state::DialogueState;

pub const DEFAULT_MAX_TURNS: usize = 40;
pub const BYE: &str = "bye";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("user simulator failed: {0}")]
    User(String),
    #[error("system agent failed: {0}")]
    System(String),
    #[error("invalid {speaker:?} act: {source}")]
    Act { speaker: Speaker, source: ActError },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserTurn {
    pub acts: Vec<DialogueAct>,
    /// The user has ended the dialogue with this turn.
    pub done: bool,
}

pub trait UserSimulator {
    fn name(&self) -> &str;
    /// Starts a dialogue. Simulators draw all randomness from `seed`.
    fn start(&mut self, goal: UserGoal, seed: u64) -> Result<(), SimError>;
    /// Replies to a system turn; the first call receives an empty turn.
    fn step(&mut self, system_acts: &[DialogueAct]) -> Result<UserTurn, SimError>;
    /// The goal including any changes made so far.
    fn goal(&self) -> &UserGoal;
}

pub trait SystemAgent {
    fn name(&self) -> &str;
    fn start(&mut self, seed: u64);
    fn step(&mut self, user_acts: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError>;
}

pub fn is_bye(acts: &[DialogueAct]) -> bool {
    acts.iter().any(|a| a.domain == GENERAL && a.intent == BYE)
}

/// What the system has told the user so far: slot values and, per domain,
/// the entity it named last.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SystemRecord {
    pub values: BTreeMap<(String, String), String>,
    pub selected: BTreeMap<String, usize>,
}

impl SystemRecord {
    pub fn observe(&mut self, acts: &[DialogueAct], db: &EntityDb) {
        for act in acts {
            let (Some(slot), Some(value)) = (&act.slot, &act.value) else {
                continue;
            };
            if value == REQUESTED || act.intent == "request" {
                continue;
            }
            if slot == ENTITY_SLOT {
                if let Some(i) = db.find_by_name(&act.domain, value) {
                    self.selected.insert(act.domain.clone(), i);
                }
            }
            self.values
                .insert((act.domain.clone(), slot.clone()), value.clone());
        }
    }
}

/// Success: every goal domain has a named entity that satisfies the final
/// constraints (dontcare matches anything), and every requested slot was
/// told to the user with that entity's value.
pub fn judge_success(goal: &UserGoal, record: &SystemRecord, db: &EntityDb) -> bool {
    goal.domains.iter().all(|d| {
        let Some(&entity) = record.selected.get(&d.domain) else {
            return false;
        };
        let constraints_ok = d.constraints.iter().all(|(slot, value)| {
            value == DONTCARE || db.value(&d.domain, entity, slot) == Some(value.as_str())
        });
        let requests_ok = d.requests.iter().all(|slot| {
            let told = record.values.get(&(d.domain.clone(), slot.clone()));
            told.is_some() && told.map(String::as_str) == db.value(&d.domain, entity, slot)
        });
        constraints_ok && requests_ok
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub dialogue: CorpusDialogue,
    pub final_goal: UserGoal,
    pub success: bool,
    /// Number of user turns.
    pub turns: usize,
    /// The user ended the dialogue before the turn limit.
    pub completed: bool,
}

/// Runs one dialogue. The user speaks first; the dialogue ends when the
/// user is done or after `max_turns` user turns.
#[allow(clippy::too_many_arguments)]
pub fn run_dialogue(
    id: &str,
    ontology: &Ontology,
    db: &EntityDb,
    user: &mut dyn UserSimulator,
    system: &mut dyn SystemAgent,
    goal: UserGoal,
    seed: u64,
    max_turns: usize,
) -> Result<DialogueOutcome, SimError> {
    let initial = goal.clone();
    user.start(goal, seed)?;
    system.start(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut record = SystemRecord::default();
    let mut turns = Vec::new();
    let mut system_acts: Vec<DialogueAct> = Vec::new();
    let mut completed = false;
    for _ in 0..max_turns {
        let reply = user.step(&system_acts)?;
        ontology
            .validate_acts(&reply.acts, Speaker::User)
            .map_err(|source| SimError::Act {
                speaker: Speaker::User,
                source,
            })?;
        turns.push(CorpusTurn {
            system: std::mem::take(&mut system_acts),
            user: reply.acts.clone(),
        });
        if reply.done {
            completed = true;
            break;
        }
        system_acts = system.step(&reply.acts)?;
        ontology
            .validate_acts(&system_acts, Speaker::System)
            .map_err(|source| SimError::Act {
                speaker: Speaker::System,
                source,
            })?;
        record.observe(&system_acts, db);
    }
    let final_goal = user.goal().clone();
    let success = completed && judge_success(&final_goal, &record, db);
    Ok(DialogueOutcome {
        turns: turns.len(),
        dialogue: CorpusDialogue {
            id: id.to_string(),
            goal: strip_progress(initial),
            turns,
        },
        final_goal,
        success,
        completed,
    })
}

fn strip_progress(mut goal: UserGoal) -> UserGoal {
    goal.flags.clear();
    goal.goal_changes.clear();
    goal
}

/// Seed of the `index`-th dialogue of a batch.
pub fn dialogue_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub n_dialogues: usize,
    pub seed: u64,
    pub goal: GoalConfig,
    /// Probability that a goal domain ignores the database.
    pub unsat_prob: f64,
    pub max_turns: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            n_dialogues: 100,
            seed: 0,
            goal: GoalConfig::default(),
            unsat_prob: 0.05,
            max_turns: DEFAULT_MAX_TURNS,
        }
    }
}

/// Runs a seeded batch of dialogues, one fresh agent pair per dialogue.
/// Results are in dialogue order and independent of the thread count.
pub fn simulate_batch<U, S>(
    ontology: &Ontology,
    db: &EntityDb,
    make_user: U,
    make_system: S,
    config: &BatchConfig,
) -> Result<Vec<DialogueOutcome>, SimError>
where
    U: Fn() -> Box<dyn UserSimulator> + Sync,
    S: Fn() -> Box<dyn SystemAgent> + Sync,
{
    use rayon::prelude::*;
    (0..config.n_dialogues)
        .into_par_iter()
        .map(|i| {
            let seed = dialogue_seed(config.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let goal = sample_db_goal(ontology, db, &mut rng, &config.goal, config.unsat_prob)
                .map_err(|e| SimError::User(e.to_string()))?;
            let mut user = make_user();
            let mut system = make_system();
            run_dialogue(
                &format!("dlg-{i:06}"),
                ontology,
                db,
                user.as_mut(),
                system.as_mut(),
                goal,
                rng.next_u64(),
                config.max_turns,
            )
        })
        .collect()
}

/// A synthetic corpus from the agenda-based user talking to the rule
/// system, with the success flag of every dialogue.
pub fn generate_corpus(
    ontology: &Arc<Ontology>,
    db: &Arc<EntityDb>,
    config: &BatchConfig,
) -> Result<(Corpus, Vec<bool>), SimError> {
    let outcomes = simulate_batch(
        ontology,
        db,
        || Box::new(AgendaUser::new(ontology.clone())),
        || Box::new(RuleSystemAgent::new(ontology.clone(), db.clone())),
        config,
    )?;
    let successes = outcomes.iter().map(|o| o.success).collect();
    let corpus = Corpus::new(outcomes.into_iter().map(|o| o.dialogue).collect());
    Ok((corpus, successes))
}

/// Success rate and mean number of user turns.
pub fn summarize(outcomes: &[DialogueOutcome]) -> (f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0);
    }
    let n = outcomes.len() as f64;
    let success = outcomes.iter().filter(|o| o.success).count() as f64 / n;
    let turns = outcomes.iter().map(|o| o.turns as f64).sum::<f64>() / n;
    (success, turns)
}

/// Replays a recorded dialogue's system turns through a fresh state; used by
/// tests and diagnostics.
pub fn replay_state(
    ontology: &Ontology,
    dialogue: &CorpusDialogue,
) -> Result<DialogueState, ActError> {
    let mut state = DialogueState::new();
    for turn in &dialogue.turns {
        state.apply_system_acts(ontology, &turn.system)?;
        state.record_user_acts(ontology, &turn.user, BTreeMap::new())?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::DomainGoal;
    fn goal() -> UserGoal {
        UserGoal::new(vec![DomainGoal {
            domain: "eatery".into(),
            constraints: vec![("food".into(), "indian".into())],
            requests: vec!["phone".into()],
        }])
    }

    #[test]
    fn success_needs_matching_entity_and_answers() {
        let o = Ontology::toy();
        let db = EntityDb::generate(&o, 20, &mut ChaCha8Rng::seed_from_u64(1));
        let i = db.query("eatery", [("food", "indian")])[0];
        let j = db.query("eatery", [("food", "french")])[0];
        let name = |k| db.value("eatery", k, ENTITY_SLOT).unwrap().to_string();
        let phone = |k| db.value("eatery", k, "phone").unwrap().to_string();

        let mut record = SystemRecord::default();
        record.observe(
            &[DialogueAct::new("recommend", "eatery", "name", name(i))],
            &db,
        );
        assert!(!judge_success(&goal(), &record, &db));
        record.observe(
            &[DialogueAct::new("inform", "eatery", "phone", phone(i))],
            &db,
        );
        assert!(judge_success(&goal(), &record, &db));

        // Naming a non-matching entity afterwards breaks the constraint.
        record.observe(
            &[DialogueAct::new("recommend", "eatery", "name", name(j))],
            &db,
        );
        assert!(!judge_success(&goal(), &record, &db));
    }

    struct Silent(UserGoal);
    impl UserSimulator for Silent {
        fn name(&self) -> &str {
            "silent"
        }
        fn start(&mut self, goal: UserGoal, _seed: u64) -> Result<(), SimError> {
            self.0 = goal;
            Ok(())
        }
        fn step(&mut self, _acts: &[DialogueAct]) -> Result<UserTurn, SimError> {
            Ok(UserTurn::default())
        }
        fn goal(&self) -> &UserGoal {
            &self.0
        }
    }
    struct Idle;
    impl SystemAgent for Idle {
        fn name(&self) -> &str {
            "idle"
        }
        fn start(&mut self, _seed: u64) {}
        fn step(&mut self, _acts: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError> {
            Ok(vec![DialogueAct::general("reqmore")])
        }
    }

    #[test]
    fn turn_limit_ends_in_failure() {
        let o = Ontology::toy();
        let db = EntityDb::generate(&o, 20, &mut ChaCha8Rng::seed_from_u64(1));
        let mut user = Silent(UserGoal::default());
        let out = run_dialogue("x", &o, &db, &mut user, &mut Idle, goal(), 0, 40).unwrap();
        assert_eq!(out.turns, 40);
        assert!(!out.completed && !out.success);
        assert!(out.dialogue.turns[0].system.is_empty());
    }

    #[test]
    fn abus_against_rules_mostly_succeeds() {
        let o = Arc::new(Ontology::toy());
        let db = Arc::new(EntityDb::generate(
            &o,
            20,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let config = BatchConfig {
            n_dialogues: 300,
            seed: 11,
            ..BatchConfig::default()
        };
        let out = simulate_batch(
            &o,
            &db,
            || Box::new(AgendaUser::new(o.clone())),
            || Box::new(RuleSystemAgent::new(o.clone(), db.clone())),
            &config,
        )
        .unwrap();
        let (success, turns) = summarize(&out);
        assert!(turns > 1.0);
        assert!(success >= 0.9);
    }
}
