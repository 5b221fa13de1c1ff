//! User goals: per-domain constraints and requests plus fulfilment flags.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, SlotKey, REQUESTED};

/// Maximum number of domains in a goal.
pub const DEFAULT_MAX_DOMAINS: usize = 6;
/// Maximum number of slots (constraints plus requests) per goal domain.
pub const DEFAULT_MAX_SLOTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GoalError {
    #[error("goal configuration error: {0}")]
    Config(String),
    #[error("invalid goal: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotRole {
    Constraint,
    Request,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFlags {
    pub fulfilled: bool,
    pub first_mentioned_turn: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    pub domain: String,
    /// Ordered `(slot, value)` pairs.
    pub constraints: Vec<(String, String)>,
    pub requests: Vec<String>,
}

impl DomainGoal {
    /// Slot names in goal order: constraints first, then requests.
    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.constraints
            .iter()
            .map(|(s, _)| s.as_str())
            .chain(self.requests.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.constraints.len() + self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub domains: Vec<DomainGoal>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flags: BTreeMap<SlotKey, SlotFlags>,
    /// Slot → replacement value, for every goal change made so far.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub goal_changes: BTreeMap<SlotKey, String>,
}

impl UserGoal {
    pub fn new(domains: Vec<DomainGoal>) -> Self {
        Self {
            domains,
            flags: BTreeMap::new(),
            goal_changes: BTreeMap::new(),
        }
    }

    /// Every goal slot in goal order.
    pub fn slot_keys(&self) -> Vec<SlotKey> {
        self.domains
            .iter()
            .flat_map(|d| d.slot_names().map(move |s| SlotKey::new(&d.domain, s)))
            .collect()
    }

    pub fn domain_names(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|d| d.domain.as_str())
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.iter().any(|d| d.domain == domain)
    }

    pub fn role(&self, key: &SlotKey) -> Option<SlotRole> {
        let d = self.domains.iter().find(|d| d.domain == key.domain)?;
        if d.constraints.iter().any(|(s, _)| *s == key.slot) {
            Some(SlotRole::Constraint)
        } else if d.requests.contains(&key.slot) {
            Some(SlotRole::Request)
        } else {
            None
        }
    }

    /// Current constraint value (after goal changes), or `?` for a request.
    pub fn value(&self, key: &SlotKey) -> Option<&str> {
        let d = self.domains.iter().find(|d| d.domain == key.domain)?;
        if let Some((_, v)) = d.constraints.iter().find(|(s, _)| *s == key.slot) {
            return Some(v.as_str());
        }
        d.requests.contains(&key.slot).then_some(REQUESTED)
    }

    pub fn constraint_value(&self, key: &SlotKey) -> Option<&str> {
        match self.role(key) {
            Some(SlotRole::Constraint) => self.value(key),
            _ => None,
        }
    }

    pub fn constraints(&self) -> impl Iterator<Item = (SlotKey, &str)> {
        self.domains.iter().flat_map(|d| {
            d.constraints
                .iter()
                .map(move |(s, v)| (SlotKey::new(&d.domain, s), v.as_str()))
        })
    }

    pub fn requests(&self) -> impl Iterator<Item = SlotKey> + '_ {
        self.domains
            .iter()
            .flat_map(|d| d.requests.iter().map(move |s| SlotKey::new(&d.domain, s)))
    }

    pub fn flags(&self, key: &SlotKey) -> SlotFlags {
        self.flags.get(key).cloned().unwrap_or_default()
    }

    pub fn is_fulfilled(&self, key: &SlotKey) -> bool {
        self.flags.get(key).is_some_and(|f| f.fulfilled)
    }

    pub fn all_fulfilled(&self) -> bool {
        self.slot_keys().iter().all(|k| self.is_fulfilled(k))
    }

    /// Replaces a constraint value. Slot order is untouched; the fulfilment
    /// flag is reset.
    pub fn change_value(&mut self, key: &SlotKey, value: &str) -> Result<(), GoalError> {
        let d = self
            .domains
            .iter_mut()
            .find(|d| d.domain == key.domain)
            .ok_or_else(|| GoalError::Invalid(format!("{key} is not in the goal")))?;
        let entry = d
            .constraints
            .iter_mut()
            .find(|(s, _)| *s == key.slot)
            .ok_or_else(|| GoalError::Invalid(format!("{key} is not a goal constraint")))?;
        entry.1 = value.to_string();
        self.goal_changes.insert(key.clone(), value.to_string());
        self.flags.entry(key.clone()).or_default().fulfilled = false;
        Ok(())
    }

    /// Checks the goal against the ontology and the index bounds.
    pub fn validate(
        &self,
        ontology: &Ontology,
        max_domains: usize,
        max_slots: usize,
    ) -> Result<(), GoalError> {
        if self.domains.len() > max_domains {
            return Err(GoalError::Invalid(format!(
                "{} domains exceed the limit of {max_domains}",
                self.domains.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.domain.as_str()) {
                return Err(GoalError::Invalid(format!("duplicate domain {}", d.domain)));
            }
            let spec = ontology
                .domain(&d.domain)
                .ok_or_else(|| GoalError::Invalid(format!("unknown domain {}", d.domain)))?;
            if d.len() > max_slots {
                return Err(GoalError::Invalid(format!(
                    "domain {} has {} slots, limit {max_slots}",
                    d.domain,
                    d.len()
                )));
            }
            let mut slots = std::collections::BTreeSet::new();
            for name in d.slot_names() {
                if !slots.insert(name) {
                    return Err(GoalError::Invalid(format!(
                        "duplicate slot {}-{name}",
                        d.domain
                    )));
                }
            }
            for (slot, value) in &d.constraints {
                let s = spec.slot(slot).ok_or_else(|| {
                    GoalError::Invalid(format!("unknown slot {}-{slot}", d.domain))
                })?;
                if !s.values.iter().any(|v| v == value) {
                    return Err(GoalError::Invalid(format!(
                        "value {value:?} not in inventory of {}-{slot}",
                        d.domain
                    )));
                }
            }
            for slot in &d.requests {
                let s = spec.slot(slot).ok_or_else(|| {
                    GoalError::Invalid(format!("unknown slot {}-{slot}", d.domain))
                })?;
                if !s.requestable {
                    return Err(GoalError::Invalid(format!(
                        "{}-{slot} is not requestable",
                        d.domain
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Bounds for random goal sampling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalConfig {
    pub min_domains: usize,
    pub max_domains: usize,
    pub min_constraints: usize,
    pub max_constraints: usize,
    pub min_requests: usize,
    pub max_requests: usize,
    /// Index capacity: domains per goal.
    pub l_d: usize,
    /// Index capacity: slots per goal domain.
    pub l_s: usize,
}

impl Default for GoalConfig {
    fn default() -> Self {
        Self {
            min_domains: 1,
            max_domains: 2,
            min_constraints: 1,
            max_constraints: 3,
            min_requests: 1,
            max_requests: 2,
            l_d: DEFAULT_MAX_DOMAINS,
            l_s: DEFAULT_MAX_SLOTS,
        }
    }
}

impl GoalConfig {
    fn check(&self, ontology: &Ontology) -> Result<Vec<usize>, GoalError> {
        let fail = |msg: String| Err(GoalError::Config(msg));
        if self.min_domains == 0 || self.min_domains > self.max_domains {
            return fail(format!(
                "domain bounds [{}, {}] are empty or zero",
                self.min_domains, self.max_domains
            ));
        }
        if self.min_constraints > self.max_constraints || self.min_requests > self.max_requests {
            return fail("slot bounds are inverted".into());
        }
        if self.max_domains > self.l_d {
            return fail(format!(
                "max_domains {} exceeds l_d {}",
                self.max_domains, self.l_d
            ));
        }
        if self.max_constraints + self.max_requests > self.l_s {
            return fail(format!(
                "{} constraints + {} requests exceed l_s {}",
                self.max_constraints, self.max_requests, self.l_s
            ));
        }
        if self.min_constraints + self.min_requests == 0 {
            return fail("goal domains must contain at least one slot".into());
        }
        // Domains able to host the minimum slot counts.
        let eligible: Vec<usize> = ontology
            .domains
            .iter()
            .enumerate()
            .filter(|(_, d)| {
                let inf = d.informable().count();
                let req = d.requestable().count();
                inf >= self.min_constraints
                    && d.slots.len() >= self.min_constraints + self.min_requests
                    && req >= self.min_requests
            })
            .map(|(i, _)| i)
            .collect();
        if eligible.len() < self.min_domains {
            return fail(format!(
                "only {} domains can host {} constraints and {} requests, need {}",
                eligible.len(),
                self.min_constraints,
                self.min_requests,
                self.min_domains
            ));
        }
        Ok(eligible)
    }
}

/// Samples a goal. Domain order, slot order and values come from `rng`.
pub fn sample_goal<R: Rng + ?Sized>(
    ontology: &Ontology,
    rng: &mut R,
    config: &GoalConfig,
) -> Result<UserGoal, GoalError> {
    let mut eligible = config.check(ontology)?;
    let max_domains = config.max_domains.min(eligible.len());
    let n_domains = rng.gen_range(config.min_domains..=max_domains);
    eligible.shuffle(rng);
    let mut domains = Vec::with_capacity(n_domains);
    for &di in eligible.iter().take(n_domains) {
        let spec = &ontology.domains[di];
        let mut informable: Vec<&crate::ontology::SlotSpec> = spec.informable().collect();
        informable.shuffle(rng);
        let max_c = config.max_constraints.min(informable.len());
        let n_c = rng.gen_range(config.min_constraints..=max_c);
        let constraints: Vec<(String, String)> = informable[..n_c]
            .iter()
            .map(|s| {
                let value = s.values.choose(rng).expect("informable has values");
                (s.name.clone(), value.clone())
            })
            .collect();
        let mut requestable: Vec<&str> = spec
            .requestable()
            .filter(|r| !constraints.iter().any(|(s, _)| s == r))
            .collect();
        requestable.shuffle(rng);
        let max_r = config.max_requests.min(requestable.len());
        let min_r = config.min_requests.min(max_r);
        let n_r = rng.gen_range(min_r..=max_r);
        let requests = requestable[..n_r].iter().map(|s| s.to_string()).collect();
        domains.push(DomainGoal {
            domain: spec.name.clone(),
            constraints,
            requests,
        });
    }
    let goal = UserGoal::new(domains);
    goal.validate(ontology, config.l_d, config.l_s)?;
    Ok(goal)
}
