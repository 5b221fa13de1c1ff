//! Rule-based dialogue system over the entity database.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::act::DialogueAct;
use crate::db::EntityDb;
use crate::ontology::{Ontology, BOOKING_SLOT, ENTITY_SLOT, GENERAL, USER_INFORM, USER_REQUEST};
use crate::sim::{is_bye, SimError, SystemAgent, BYE};

/// Informed constraints per domain, oldest first.
pub type Belief = BTreeMap<String, Vec<(String, String)>>;

pub struct RuleSystemAgent {
    ontology: Arc<Ontology>,
    db: Arc<EntityDb>,
    pub belief: Belief,
    pub selected: BTreeMap<String, usize>,
    pub booked: BTreeMap<String, String>,
}

impl RuleSystemAgent {
    pub fn new(ontology: Arc<Ontology>, db: Arc<EntityDb>) -> Self {
        Self {
            ontology,
            db,
            belief: Belief::new(),
            selected: BTreeMap::new(),
            booked: BTreeMap::new(),
        }
    }

    fn matches(&self, domain: &str) -> Vec<usize> {
        let cons = self.belief.get(domain).map(Vec::as_slice).unwrap_or(&[]);
        self.db
            .query(domain, cons.iter().map(|(s, v)| (s.as_str(), v.as_str())))
    }

    fn nooffer(&self, domain: &str) -> DialogueAct {
        match self.belief.get(domain).and_then(|b| b.last()) {
            Some((slot, value)) => DialogueAct::new("nooffer", domain, slot, value),
            None => DialogueAct {
                intent: "nooffer".into(),
                domain: domain.to_string(),
                slot: None,
                value: None,
            },
        }
    }

    /// Selects an entity if none is selected; returns the act naming it
    /// when the selection is new.
    fn select(&mut self, domain: &str, matches: &[usize]) -> (usize, Option<DialogueAct>) {
        if let Some(&i) = self.selected.get(domain) {
            return (i, None);
        }
        let i = matches[0];
        self.selected.insert(domain.to_string(), i);
        let name = self
            .db
            .value(domain, i, ENTITY_SLOT)
            .map(|name| DialogueAct::new("recommend", domain, ENTITY_SLOT, name));
        (i, name)
    }

    fn recommend(&mut self, domain: &str, matches: &[usize]) -> Option<DialogueAct> {
        let (i, _) = self.select(domain, matches);
        self.db
            .value(domain, i, ENTITY_SLOT)
            .map(|name| DialogueAct::new("recommend", domain, ENTITY_SLOT, name))
    }

    /// One system turn; deterministic given belief, acts and database.
    pub fn respond(&mut self, user_acts: &[DialogueAct]) -> Vec<DialogueAct> {
        if is_bye(user_acts) {
            return vec![DialogueAct::general(BYE)];
        }
        let mut domains: Vec<String> = Vec::new();
        for act in user_acts {
            if act.domain == GENERAL {
                continue;
            }
            if !domains.contains(&act.domain) {
                domains.push(act.domain.clone());
            }
            if act.intent != USER_INFORM {
                continue;
            }
            let (Some(slot), Some(value)) = (&act.slot, &act.value) else {
                continue;
            };
            let belief = self.belief.entry(act.domain.clone()).or_default();
            belief.retain(|(s, _)| s != slot);
            belief.push((slot.clone(), value.clone()));
        }

        let mut out = Vec::new();
        for domain in domains {
            let matches = self.matches(&domain);
            if let Some(&i) = self.selected.get(&domain) {
                if !matches.contains(&i) {
                    self.selected.remove(&domain);
                    self.booked.remove(&domain);
                }
            }
            let requests: Vec<&str> = user_acts
                .iter()
                .filter(|a| a.domain == domain && a.intent == USER_REQUEST)
                .filter_map(|a| a.slot.as_deref())
                .collect();
            if matches.is_empty() {
                out.push(self.nooffer(&domain));
                continue;
            }
            if !requests.is_empty() {
                let (i, named) = self.select(&domain, &matches);
                out.extend(named);
                for slot in requests {
                    let Some(value) = self.db.value(&domain, i, slot).map(str::to_string) else {
                        continue;
                    };
                    if slot == ENTITY_SLOT {
                        out.push(DialogueAct::new("recommend", &domain, slot, value));
                    } else if slot == BOOKING_SLOT {
                        self.booked.insert(domain.clone(), value.clone());
                        out.push(DialogueAct::new("book", &domain, slot, value));
                    } else {
                        out.push(DialogueAct::new("inform", &domain, slot, value));
                    }
                }
                continue;
            }
            let missing = self.ontology.domain(&domain).and_then(|spec| {
                let belief = self.belief.get(&domain);
                spec.informable()
                    .find(|s| !belief.is_some_and(|b| b.iter().any(|(k, _)| *k == s.name)))
                    .map(|s| s.name.clone())
            });
            match missing {
                Some(slot) if matches.len() > 1 => {
                    out.push(DialogueAct::new("request", &domain, slot, "?"));
                }
                _ => out.extend(self.recommend(&domain, &matches)),
            }
        }
        out.dedup();
        if out.is_empty() {
            out.push(DialogueAct::general("reqmore"));
        }
        out
    }
}

impl SystemAgent for RuleSystemAgent {
    fn name(&self) -> &str {
        "rules"
    }

    fn start(&mut self, _seed: u64) {
        self.belief.clear();
        self.selected.clear();
        self.booked.clear();
    }

    fn step(&mut self, user_acts: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError> {
        Ok(self.respond(user_acts))
    }
}
