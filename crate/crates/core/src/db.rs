//! In-memory entity database used by the rule-based system and the success
//! judge.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goal::{sample_goal, GoalConfig, GoalError, UserGoal};
use crate::ontology::{Ontology, BOOKING_SLOT, DONTCARE, ENTITY_SLOT};

pub const DB_SCHEMA: &str = "db/1";
pub const DEFAULT_ENTITIES_PER_DOMAIN: usize = 20;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("db io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("db parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("db schema {found:?}, expected {DB_SCHEMA:?}")]
    Schema { found: String },
    #[error("db does not match the ontology: {0}")]
    Mismatch(String),
}

/// One row: slot → value, covering every slot of its domain.
pub type Entity = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityDb {
    pub schema: String,
    pub ontology_fingerprint: String,
    pub domains: BTreeMap<String, Vec<Entity>>,
}

fn filler_value(domain: &str, slot: &str, i: usize) -> String {
    match slot {
        ENTITY_SLOT => format!("{domain}-{i}"),
        BOOKING_SLOT => format!("{domain}-ref-{i:04}"),
        _ => format!("{domain}-{slot}-{i}"),
    }
}

impl EntityDb {
    /// Generates `n` entities per domain. Every inventory value of every
    /// informable slot occurs at least once when `n` is at least the
    /// inventory size.
    pub fn generate<R: Rng + ?Sized>(ontology: &Ontology, n: usize, rng: &mut R) -> Self {
        let mut domains = BTreeMap::new();
        for domain in &ontology.domains {
            let mut rows: Vec<Entity> = (0..n).map(|_| Entity::new()).collect();
            for slot in &domain.slots {
                if slot.informable() {
                    let mut column: Vec<String> =
                        slot.values.iter().cycle().take(n).cloned().collect();
                    column.shuffle(rng);
                    for (row, value) in rows.iter_mut().zip(column) {
                        row.insert(slot.name.clone(), value);
                    }
                } else {
                    for (i, row) in rows.iter_mut().enumerate() {
                        row.insert(slot.name.clone(), filler_value(&domain.name, &slot.name, i));
                    }
                }
            }
            domains.insert(domain.name.clone(), rows);
        }
        Self {
            schema: DB_SCHEMA.to_string(),
            ontology_fingerprint: ontology.fingerprint(),
            domains,
        }
    }

    pub fn from_json_str(text: &str, ontology: &Ontology) -> Result<Self, DbError> {
        let db: EntityDb = serde_json::from_str(text)?;
        if db.schema != DB_SCHEMA {
            return Err(DbError::Schema { found: db.schema });
        }
        db.validate(ontology)?;
        Ok(db)
    }

    pub fn load(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Self, DbError> {
        Self::from_json_str(&std::fs::read_to_string(path)?, ontology)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("db serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DbError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), DbError> {
        if self.ontology_fingerprint != ontology.fingerprint() {
            return Err(DbError::Mismatch("ontology fingerprint differs".into()));
        }
        for (name, rows) in &self.domains {
            let spec = ontology
                .domain(name)
                .ok_or_else(|| DbError::Mismatch(format!("unknown domain {name:?}")))?;
            for (i, row) in rows.iter().enumerate() {
                for slot in &spec.slots {
                    let value = row.get(&slot.name).ok_or_else(|| {
                        DbError::Mismatch(format!("{name} entity {i} lacks slot {:?}", slot.name))
                    })?;
                    if slot.informable() && !slot.values.contains(value) {
                        return Err(DbError::Mismatch(format!(
                            "{name} entity {i}: {value:?} is not a value of {:?}",
                            slot.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entities(&self, domain: &str) -> &[Entity] {
        self.domains.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entity(&self, domain: &str, index: usize) -> Option<&Entity> {
        self.entities(domain).get(index)
    }

    pub fn value(&self, domain: &str, index: usize, slot: &str) -> Option<&str> {
        self.entity(domain, index)?.get(slot).map(String::as_str)
    }

    /// Indices of entities matching every constraint; `dontcare` matches
    /// anything.
    pub fn query<'a, I>(&self, domain: &str, constraints: I) -> Vec<usize>
    where
        I: IntoIterator<Item = (&'a str, &'a str)> + Clone,
    {
        self.entities(domain)
            .iter()
            .enumerate()
            .filter(|(_, row)| {
                constraints.clone().into_iter().all(|(slot, value)| {
                    value == DONTCARE || row.get(slot).map(String::as_str) == Some(value)
                })
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Looks an entity up by its name slot.
    pub fn find_by_name(&self, domain: &str, name: &str) -> Option<usize> {
        self.entities(domain)
            .iter()
            .position(|row| row.get(ENTITY_SLOT).map(String::as_str) == Some(name))
    }
}

/// Samples a goal whose constraints are copied from a random entity, so the
/// dialogue can succeed. With probability `unsat_prob` a domain keeps the
/// independently drawn values instead, which may match nothing.
pub fn sample_db_goal<R: Rng + ?Sized>(
    ontology: &Ontology,
    db: &EntityDb,
    rng: &mut R,
    config: &GoalConfig,
    unsat_prob: f64,
) -> Result<UserGoal, GoalError> {
    let mut goal = sample_goal(ontology, rng, config)?;
    for domain in &mut goal.domains {
        if rng.gen_bool(unsat_prob.clamp(0.0, 1.0)) {
            continue;
        }
        let Some(entity) = db.entities(&domain.domain).choose(rng) else {
            continue;
        };
        for (slot, value) in &mut domain.constraints {
            if let Some(v) = entity.get(slot.as_str()) {
                *value = v.clone();
            }
        }
    }
    Ok(goal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_db_covers_inventory() {
        let o = Ontology::toy();
        let db = EntityDb::generate(
            &o,
            DEFAULT_ENTITIES_PER_DOMAIN,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        db.validate(&o).unwrap();
        for domain in &o.domains {
            assert_eq!(db.entities(&domain.name).len(), 20);
            for slot in domain.informable() {
                for value in &slot.values {
                    let hits = db.query(&domain.name, [(slot.name.as_str(), value.as_str())]);
                    assert!(!hits.is_empty(), "{}-{}={value}", domain.name, slot.name);
                }
            }
        }
        let back = EntityDb::from_json_str(&db.to_json(), &o).unwrap();
        assert_eq!(back, db);
    }

    #[test]
    fn dontcare_matches_everything() {
        let o = Ontology::toy();
        let db = EntityDb::generate(&o, 20, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(db.query("eatery", [("area", DONTCARE)]).len(), 20);
        let name = db.value("eatery", 4, ENTITY_SLOT).unwrap().to_string();
        assert_eq!(db.find_by_name("eatery", &name), Some(4));
    }

    #[test]
    fn db_goals_are_satisfiable() {
        let o = Ontology::toy();
        let db = EntityDb::generate(&o, 20, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let goal = sample_db_goal(&o, &db, &mut rng, &GoalConfig::default(), 0.0).unwrap();
            for d in &goal.domains {
                let c = d.constraints.iter().map(|(s, v)| (s.as_str(), v.as_str()));
                assert!(!db.query(&d.domain, c).is_empty());
            }
        }
    }

    #[test]
    fn foreign_db_is_rejected() {
        let o = Ontology::toy();
        let db = EntityDb::generate(&o, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let other = o.without_domain("transit");
        assert!(matches!(
            EntityDb::from_json_str(&db.to_json(), &other),
            Err(DbError::Mismatch(_))
        ));
    }
}
