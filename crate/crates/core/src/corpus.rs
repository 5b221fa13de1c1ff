//! Dialogue corpora: file format, supervised target extraction, splits and
//! ingestion of MultiWOZ-style annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::act::{ActError, DialogueAct, Speaker};
use crate::encoder::{
    assign_indices, encode_turn, EncodeError, FeatureLayout, IndexMap, OutputClass, SlotList,
    TurnBlock,
};
use crate::goal::{DomainGoal, GoalError, SlotRole, UserGoal};
use crate::ontology::{Ontology, SlotKey, DONTCARE, GENERAL, USER_INFORM, USER_REQUEST};
use crate::state::{mark_fulfilled, DialogueState};

pub const CORPUS_SCHEMA: &str = "corpus/1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("schema mismatch in {location}: {message}")]
    Schema { location: String, message: String },
    #[error("dialogue {id}: invalid act at turn {turn}: {source}")]
    Act {
        id: String,
        turn: usize,
        source: ActError,
    },
    #[error("dialogue {id}: invalid goal: {source}")]
    Goal { id: String, source: GoalError },
    #[error("dialogue {id}: encoding failed at turn {turn}: {source}")]
    Encode {
        id: String,
        turn: usize,
        source: EncodeError,
    },
    #[error("dialogue {id}, turn {turn}: {message}")]
    Unlabelable {
        id: String,
        turn: usize,
        message: String,
    },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("split error: {0}")]
    Split(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusTurn {
    pub system: Vec<DialogueAct>,
    pub user: Vec<DialogueAct>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDialogue {
    pub id: String,
    pub goal: UserGoal,
    /// The first system turn is always empty.
    pub turns: Vec<CorpusTurn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    schema: String,
    id: String,
    goal: UserGoal,
    turns: Vec<CorpusTurn>,
}

impl CorpusDialogue {
    /// Checks turn parity and validates every act and the goal.
    pub fn validate(&self, ontology: &Ontology, l_d: usize, l_s: usize) -> Result<(), CorpusError> {
        self.goal
            .validate(ontology, l_d, l_s)
            .map_err(|source| CorpusError::Goal {
                id: self.id.clone(),
                source,
            })?;
        if let Some(first) = self.turns.first() {
            if !first.system.is_empty() {
                return Err(CorpusError::Schema {
                    location: format!("dialogue {}", self.id),
                    message: "the first system turn must be empty".into(),
                });
            }
        }
        for (turn, record) in self.turns.iter().enumerate() {
            let wrap = |source| CorpusError::Act {
                id: self.id.clone(),
                turn,
                source,
            };
            ontology
                .validate_acts(&record.system, Speaker::System)
                .map_err(wrap)?;
            ontology
                .validate_acts(&record.user, Speaker::User)
                .map_err(wrap)?;
        }
        Ok(())
    }

    /// Domains referenced by the goal or by any act.
    pub fn touched_domains(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.goal.domain_names().map(str::to_string).collect();
        for turn in &self.turns {
            for act in turn.system.iter().chain(&turn.user) {
                if act.domain != GENERAL {
                    out.insert(act.domain.clone());
                }
            }
        }
        out
    }

    pub fn touches(&self, domain: &str) -> bool {
        self.touched_domains().contains(domain)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub dialogues: Vec<CorpusDialogue>,
}

impl Corpus {
    pub fn new(dialogues: Vec<CorpusDialogue>) -> Self {
        Self { dialogues }
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusDialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// Dialogues with the given ids, in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Corpus {
        let by_id: BTreeMap<&str, &CorpusDialogue> =
            self.dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
        Corpus::new(
            ids.iter()
                .filter_map(|id| by_id.get(id.as_str()).map(|d| (*d).clone()))
                .collect(),
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.dialogues {
            let line = CorpusLine {
                schema: CORPUS_SCHEMA.to_string(),
                id: d.id.clone(),
                goal: d.goal.clone(),
                turns: d.turns.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("corpus line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl_reader(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut dialogues = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine =
                serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                    line: i + 1,
                    source,
                })?;
            if parsed.schema != CORPUS_SCHEMA {
                return Err(CorpusError::Schema {
                    location: format!("line {}", i + 1),
                    message: format!("schema {:?}, expected {CORPUS_SCHEMA:?}", parsed.schema),
                });
            }
            dialogues.push(CorpusDialogue {
                id: parsed.id,
                goal: parsed.goal,
                turns: parsed.turns,
            });
        }
        Ok(Self { dialogues })
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_jsonl_reader(BufReader::new(std::fs::File::open(path)?))
    }
}

/// Supervised targets of one user turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub turn: usize,
    /// S^t in input order.
    pub slots: Vec<SlotKey>,
    /// One class in `0..6` per slot of `slots`.
    pub targets: Vec<usize>,
    /// Domain index of each slot of `slots`.
    pub slot_domains: Vec<usize>,
    /// Bit j set iff the dialogue's j-th domain appears in the user acts.
    pub domain_targets: Vec<u8>,
}

/// A replayed dialogue: targets plus, when a layout was given, the encoded
/// slot blocks of every turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialogue {
    pub id: String,
    pub examples: Vec<TrainingExample>,
    pub blocks: Vec<TurnBlock>,
}

/// Seed for a dialogue's slot permutation, derived from its id.
pub fn dialogue_order_seed(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Classifies one user act for a slot, before precedence is applied.
fn classify_act(
    act: &DialogueAct,
    key: &SlotKey,
    goal: &UserGoal,
    state: &DialogueState,
    ontology: &Ontology,
) -> Option<OutputClass> {
    if act.intent == USER_REQUEST {
        return Some(OutputClass::Request);
    }
    if act.intent != USER_INFORM {
        return None;
    }
    let value = act.value.as_deref()?;
    if value == DONTCARE {
        return Some(OutputClass::DontCare);
    }
    if goal.constraint_value(key) == Some(value) {
        return Some(OutputClass::FromGoal);
    }
    if state.system_value(key) == Some(value) {
        return Some(OutputClass::FromSystem);
    }
    if ontology
        .slot(key)
        .is_some_and(|s| s.values.iter().any(|v| v == value))
    {
        return Some(OutputClass::Random);
    }
    None
}

/// Precedence when several acts address one slot: `?` > dontcare > goal >
/// system > random.
fn precedence(class: OutputClass) -> usize {
    match class {
        OutputClass::Request => 0,
        OutputClass::DontCare => 1,
        OutputClass::FromGoal => 2,
        OutputClass::FromSystem => 3,
        OutputClass::Random => 4,
        OutputClass::None => 5,
    }
}

/// Replays a dialogue turn by turn, producing targets and (optionally) the
/// encoded blocks. Everything at turn t is computed from turns ≤ t only.
pub fn replay_dialogue(
    dialogue: &CorpusDialogue,
    ontology: &Ontology,
    l_d: usize,
    l_s: usize,
    layout: Option<&FeatureLayout>,
) -> Result<EncodedDialogue, CorpusError> {
    dialogue.validate(ontology, l_d, l_s)?;
    let id = dialogue.id.clone();
    let mut goal = dialogue.goal.clone();
    let mut state = DialogueState::new();
    let mut index: IndexMap =
        assign_indices(&goal, l_d, l_s).map_err(|source| CorpusError::Encode {
            id: id.clone(),
            turn: 0,
            source,
        })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dialogue_order_seed(&id));
    let mut slot_list = SlotList::shuffled(&goal, &mut rng);
    let mut examples = Vec::with_capacity(dialogue.turns.len());
    let mut blocks = Vec::new();

    for (turn, record) in dialogue.turns.iter().enumerate() {
        state
            .apply_system_acts(ontology, &record.system)
            .map_err(|source| CorpusError::Act {
                id: id.clone(),
                turn,
                source,
            })?;
        slot_list
            .observe_system_turn(&state, &mut index)
            .map_err(|source| CorpusError::Encode {
                id: id.clone(),
                turn,
                source,
            })?;
        mark_fulfilled(&mut goal, &state);
        let slots = slot_list.current(&state);
        if let Some(layout) = layout {
            let block =
                encode_turn(&slots, &goal, &state, &index, layout, ontology).map_err(|source| {
                    CorpusError::Encode {
                        id: id.clone(),
                        turn,
                        source,
                    }
                })?;
            blocks.push(block);
        }

        let mut classes: BTreeMap<SlotKey, OutputClass> = BTreeMap::new();
        let mut domain_targets = vec![0u8; l_d];
        for act in &record.user {
            let Some(key) = act.key() else { continue };
            if !slots.contains(&key) {
                return Err(CorpusError::Unlabelable {
                    id,
                    turn,
                    message: format!(
                        "user act {act} addresses {key}, which is not in the slot list"
                    ),
                });
            }
            let class = classify_act(act, &key, &goal, &state, ontology).ok_or_else(|| {
                CorpusError::Unlabelable {
                    id: id.clone(),
                    turn,
                    message: format!("value of {act} matches neither goal, system nor ontology"),
                }
            })?;
            let entry = classes.entry(key.clone()).or_insert(class);
            if precedence(class) < precedence(*entry) {
                *entry = class;
            }
            if let Some(d) = index.domain_index(&key.domain) {
                domain_targets[d] = 1;
            }
        }
        // A random value is a goal change for constraints.
        for (key, class) in &classes {
            if *class == OutputClass::Random && goal.role(key) == Some(SlotRole::Constraint) {
                let value = record
                    .user
                    .iter()
                    .find(|a| a.key().as_ref() == Some(key) && a.intent == USER_INFORM)
                    .and_then(|a| a.value.clone())
                    .expect("random class comes from an inform");
                goal.change_value(key, &value)
                    .map_err(|source| CorpusError::Goal {
                        id: id.clone(),
                        source,
                    })?;
            }
        }
        let targets: Vec<usize> = slots
            .iter()
            .map(|k| classes.get(k).copied().unwrap_or(OutputClass::None).index())
            .collect();
        let outputs: BTreeMap<SlotKey, usize> =
            slots.iter().cloned().zip(targets.iter().copied()).collect();
        state
            .record_user_acts(ontology, &record.user, outputs)
            .map_err(|source| CorpusError::Act {
                id: id.clone(),
                turn,
                source,
            })?;
        let slot_domains = slots
            .iter()
            .map(|k| {
                index
                    .domain_index(&k.domain)
                    .expect("listed slots are indexed")
            })
            .collect();
        examples.push(TrainingExample {
            dialogue_id: id.clone(),
            turn,
            slot_domains,
            slots,
            targets,
            domain_targets,
        });
    }
    Ok(EncodedDialogue {
        id,
        examples,
        blocks,
    })
}

/// Per-turn supervised targets of one dialogue.
pub fn extract_targets(
    dialogue: &CorpusDialogue,
    ontology: &Ontology,
    l_d: usize,
    l_s: usize,
) -> Result<Vec<TrainingExample>, CorpusError> {
    replay_dialogue(dialogue, ontology, l_d, l_s, None).map(|e| e.examples)
}

/// Outcome of encoding a whole corpus: usable dialogues plus diagnostics for
/// the skipped ones.
#[derive(Debug, Default)]
pub struct EncodedCorpus {
    pub dialogues: Vec<EncodedDialogue>,
    pub skipped: Vec<(String, String)>,
}

impl EncodedCorpus {
    pub fn n_examples(&self) -> usize {
        self.dialogues.iter().map(|d| d.examples.len()).sum()
    }
}

/// Encodes every dialogue; unlabelable dialogues are skipped with a
/// diagnostic. Output order follows dialogue id.
pub fn encode_corpus(
    corpus: &Corpus,
    ontology: &Ontology,
    layout: &FeatureLayout,
) -> EncodedCorpus {
    use rayon::prelude::*;
    let mut results: Vec<(String, Result<EncodedDialogue, CorpusError>)> = corpus
        .dialogues
        .par_iter()
        .map(|d| {
            (
                d.id.clone(),
                replay_dialogue(d, ontology, layout.l_d, layout.l_s, Some(layout)),
            )
        })
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = EncodedCorpus::default();
    for (id, result) in results {
        match result {
            Ok(d) => out.dialogues.push(d),
            Err(e) => out.skipped.push((id, e.to_string())),
        }
    }
    out
}

/// Train/dev/test dialogue ids, optionally with one domain held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out_domain: Option<String>,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    /// Fraction of the whole corpus touching the held-out domain.
    pub removed_fraction: f64,
}

impl SplitSpec {
    /// Deterministic split by id hash: ids whose hash falls in the first
    /// `dev` fraction go to dev, the next `test` fraction to test.
    pub fn standard(corpus: &Corpus, dev: f64, test: f64) -> Self {
        let mut ids: Vec<&CorpusDialogue> = corpus.dialogues.iter().collect();
        ids.sort_by(|a, b| a.id.cmp(&b.id));
        let mut split = SplitSpec {
            held_out_domain: None,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            removed_fraction: 0.0,
        };
        for d in ids {
            let u = (dialogue_order_seed(&format!("split:{}", d.id)) >> 11) as f64
                / (1u64 << 53) as f64;
            if u < dev {
                split.dev.push(d.id.clone());
            } else if u < dev + test {
                split.test.push(d.id.clone());
            } else {
                split.train.push(d.id.clone());
            }
        }
        split
    }
}

/// Removes every dialogue touching `domain` from the training and dev sets
/// of `base`. The test set is kept whole.
pub fn leave_one_out_split(
    corpus: &Corpus,
    ontology: &Ontology,
    base: &SplitSpec,
    domain: &str,
) -> Result<SplitSpec, CorpusError> {
    if ontology.domain(domain).is_none() {
        return Err(CorpusError::UnknownDomain(domain.to_string()));
    }
    let touching: BTreeSet<&str> = corpus
        .dialogues
        .iter()
        .filter(|d| d.touches(domain))
        .map(|d| d.id.as_str())
        .collect();
    let keep = |ids: &[String]| -> Vec<String> {
        ids.iter()
            .filter(|id| !touching.contains(id.as_str()))
            .cloned()
            .collect()
    };
    let train = keep(&base.train);
    if train.is_empty() {
        return Err(CorpusError::Split(format!(
            "holding out {domain:?} leaves no training dialogues"
        )));
    }
    Ok(SplitSpec {
        held_out_domain: Some(domain.to_string()),
        train,
        dev: keep(&base.dev),
        test: base.test.clone(),
        removed_fraction: if corpus.is_empty() {
            0.0
        } else {
            touching.len() as f64 / corpus.len() as f64
        },
    })
}

/// Summary statistics written next to a generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub success_rate: f64,
    pub avg_turns: f64,
    pub avg_first_turn_slots: f64,
}

impl CorpusStats {
    pub fn from_outcomes(corpus: &Corpus, successes: &[bool]) -> Self {
        let n = corpus.len();
        if n == 0 {
            return Self::default();
        }
        let turns: usize = corpus.dialogues.iter().map(|d| d.turns.len()).sum();
        let first: usize = corpus
            .dialogues
            .iter()
            .map(|d| {
                d.turns
                    .first()
                    .map(|t| t.user.iter().filter(|a| a.slot.is_some()).count())
                    .unwrap_or(0)
            })
            .sum();
        Self {
            n_dialogues: n,
            success_rate: successes.iter().filter(|&&s| s).count() as f64 / n as f64,
            avg_turns: turns as f64 / n as f64,
            avg_first_turn_slots: first as f64 / n as f64,
        }
    }
}

// ---------------------------------------------------------------------------
// MultiWOZ-style annotation files
// ---------------------------------------------------------------------------

/// Result of ingesting an external annotation file.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub corpus: Corpus,
    /// Dialogues skipped because an act or goal could not be mapped.
    pub unmappable: usize,
    pub diagnostics: Vec<String>,
}

fn map_intent(raw: &str) -> String {
    raw.to_ascii_lowercase()
}

fn parse_acts(
    value: &serde_json::Value,
    location: &str,
    speaker: Speaker,
) -> Result<Vec<DialogueAct>, CorpusError> {
    let schema = |message: &str| CorpusError::Schema {
        location: location.to_string(),
        message: message.to_string(),
    };
    let Some(map) = value.as_object() else {
        return Err(schema("dialog_act must be an object"));
    };
    let mut acts = Vec::new();
    for (name, pairs) in map {
        let (domain, intent) = name
            .split_once('-')
            .ok_or_else(|| schema(&format!("act name {name:?} is not Domain-Intent")))?;
        let domain = domain.to_ascii_lowercase();
        let intent = map_intent(intent);
        let Some(pairs) = pairs.as_array() else {
            return Err(schema(&format!("act {name:?} must map to a list of pairs")));
        };
        for pair in pairs {
            let pair = pair
                .as_array()
                .filter(|p| p.len() == 2)
                .ok_or_else(|| schema(&format!("act {name:?} has a malformed slot pair")))?;
            let slot = pair[0]
                .as_str()
                .ok_or_else(|| schema("slot must be a string"))?;
            let val = pair[1]
                .as_str()
                .ok_or_else(|| schema("value must be a string"))?;
            if domain == GENERAL {
                acts.push(DialogueAct::general(intent.clone()));
                continue;
            }
            let slot = (slot != "none").then(|| slot.to_ascii_lowercase());
            let value = match val {
                "none" => None,
                v => Some(v.to_ascii_lowercase()),
            };
            let value = match (speaker, intent.as_str(), value) {
                (_, USER_REQUEST, _) => Some(crate::ontology::REQUESTED.to_string()),
                (_, _, v) => v,
            };
            acts.push(DialogueAct {
                intent: intent.clone(),
                domain: domain.clone(),
                slot,
                value,
            });
        }
    }
    Ok(acts)
}

fn parse_goal(value: &serde_json::Value, location: &str) -> Result<UserGoal, CorpusError> {
    let schema = |message: String| CorpusError::Schema {
        location: location.to_string(),
        message,
    };
    let Some(map) = value.as_object() else {
        return Err(schema("goal must be an object".into()));
    };
    let mut domains = Vec::new();
    for (domain, spec) in map {
        let Some(spec) = spec.as_object() else {
            continue;
        };
        if spec.is_empty() {
            continue;
        }
        let mut constraints = Vec::new();
        if let Some(info) = spec.get("info") {
            let info = info
                .as_object()
                .ok_or_else(|| schema(format!("goal.{domain}.info must be an object")))?;
            for (slot, v) in info {
                let v = v
                    .as_str()
                    .ok_or_else(|| schema(format!("goal.{domain}.info.{slot} must be a string")))?;
                constraints.push((slot.to_ascii_lowercase(), v.to_ascii_lowercase()));
            }
        }
        let mut requests = Vec::new();
        if let Some(reqt) = spec.get("reqt") {
            let reqt = reqt
                .as_array()
                .ok_or_else(|| schema(format!("goal.{domain}.reqt must be a list")))?;
            for slot in reqt {
                let slot = slot
                    .as_str()
                    .ok_or_else(|| schema(format!("goal.{domain}.reqt entries must be strings")))?;
                requests.push(slot.to_ascii_lowercase());
            }
        }
        if constraints.is_empty() && requests.is_empty() {
            continue;
        }
        domains.push(DomainGoal {
            domain: domain.to_ascii_lowercase(),
            constraints,
            requests,
        });
    }
    Ok(UserGoal::new(domains))
}

/// Reads a MultiWOZ-style file: a JSON object mapping dialogue id to
/// `{"goal": {domain: {"info": {...}, "reqt": [...]}}, "log": [{"dialog_act": {...}}]}`
/// with user and system turns alternating, user first. Dialogues whose acts
/// or goals do not map onto the ontology are skipped and counted.
pub fn ingest_multiwoz_like(
    path: impl AsRef<Path>,
    ontology: &Ontology,
    l_d: usize,
    l_s: usize,
) -> Result<IngestReport, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    ingest_multiwoz_str(&text, ontology, l_d, l_s)
}

pub fn ingest_multiwoz_str(
    text: &str,
    ontology: &Ontology,
    l_d: usize,
    l_s: usize,
) -> Result<IngestReport, CorpusError> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|source| CorpusError::Parse { line: 0, source })?;
    let Some(root) = root.as_object() else {
        return Err(CorpusError::Schema {
            location: "file".into(),
            message: "top level must map dialogue ids to dialogues".into(),
        });
    };
    let mut report = IngestReport::default();
    for (id, body) in root {
        let location = format!("dialogue {id}");
        let goal = parse_goal(
            body.get("goal").ok_or_else(|| CorpusError::Schema {
                location: location.clone(),
                message: "missing goal".into(),
            })?,
            &location,
        )?;
        let log =
            body.get("log")
                .and_then(|l| l.as_array())
                .ok_or_else(|| CorpusError::Schema {
                    location: location.clone(),
                    message: "missing log list".into(),
                })?;
        let mut user_turns = Vec::new();
        let mut system_turns = Vec::new();
        for (i, entry) in log.iter().enumerate() {
            let loc = format!("dialogue {id}, log entry {i}");
            let acts = entry.get("dialog_act").ok_or_else(|| CorpusError::Schema {
                location: loc.clone(),
                message: "missing dialog_act".into(),
            })?;
            if i % 2 == 0 {
                user_turns.push(parse_acts(acts, &loc, Speaker::User)?);
            } else {
                system_turns.push(parse_acts(acts, &loc, Speaker::System)?);
            }
        }
        // A trailing system turn without a user reply carries no target and
        // is dropped.
        let turns: Vec<CorpusTurn> = user_turns
            .into_iter()
            .enumerate()
            .map(|(i, user)| CorpusTurn {
                system: if i == 0 {
                    Vec::new()
                } else {
                    std::mem::take(&mut system_turns[i - 1])
                },
                user,
            })
            .collect();
        let dialogue = CorpusDialogue {
            id: id.clone(),
            goal,
            turns,
        };
        match dialogue.validate(ontology, l_d, l_s) {
            Ok(()) => report.corpus.dialogues.push(dialogue),
            Err(e) => {
                report.unmappable += 1;
                report.diagnostics.push(e.to_string());
            }
        }
    }
    report.corpus.dialogues.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

fn acts_to_multiwoz(acts: &[DialogueAct]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for act in acts {
        let name = format!("{}-{}", act.domain, act.intent);
        let pair = serde_json::json!([
            act.slot.clone().unwrap_or_else(|| "none".into()),
            act.value.clone().unwrap_or_else(|| "none".into())
        ]);
        map.entry(name)
            .or_insert_with(|| serde_json::Value::Array(Vec::new()))
            .as_array_mut()
            .expect("array")
            .push(pair);
    }
    serde_json::Value::Object(map)
}

/// Writes a corpus in the MultiWOZ-style layout read by [`ingest_multiwoz_like`].
pub fn export_multiwoz_like(corpus: &Corpus) -> String {
    let mut root = serde_json::Map::new();
    for d in &corpus.dialogues {
        let mut goal = serde_json::Map::new();
        for dg in &d.goal.domains {
            let info: serde_json::Map<String, serde_json::Value> = dg
                .constraints
                .iter()
                .map(|(s, v)| (s.clone(), serde_json::Value::String(v.clone())))
                .collect();
            goal.insert(
                dg.domain.clone(),
                serde_json::json!({"info": info, "reqt": dg.requests}),
            );
        }
        let mut log = Vec::new();
        for (i, turn) in d.turns.iter().enumerate() {
            if i > 0 {
                log.push(
                    serde_json::json!({"text": "", "dialog_act": acts_to_multiwoz(&turn.system)}),
                );
            }
            log.push(serde_json::json!({"text": "", "dialog_act": acts_to_multiwoz(&turn.user)}));
        }
        root.insert(d.id.clone(), serde_json::json!({"goal": goal, "log": log}));
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("serializes")
}
