//! Ontology: domains, slots, value inventories and intent inventories.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Schema tag written into every ontology file.
pub const ONTOLOGY_SCHEMA: &str = "ontology/1";
/// Pseudo-domain carried by general acts.
pub const GENERAL: &str = "general";
/// Reserved value: the speaker does not care about the slot.
pub const DONTCARE: &str = "dontcare";
/// Reserved value: the slot is being requested.
pub const REQUESTED: &str = "?";
/// Slot that carries an entity's identifier in offers.
pub const ENTITY_SLOT: &str = "name";
/// Slot that carries a booking reference.
pub const BOOKING_SLOT: &str = "ref";

/// User intents. Only inform and request carry slots.
pub const USER_INFORM: &str = "inform";
pub const USER_REQUEST: &str = "request";
pub const USER_GENERAL_INTENTS: [&str; 2] = ["thank", "bye"];

/// Default system general intents, in feature order.
pub const DEFAULT_GENERAL_INTENTS: [&str; 5] = ["welcome", "reqmore", "bye", "thank", "greet"];
/// Default system domain-specific intents, in feature order.
pub const DEFAULT_DOMAIN_SPECIFIC_INTENTS: [&str; 9] = [
    "recommend",
    "inform",
    "request",
    "select",
    "book",
    "nobook",
    "offerbook",
    "offerbooked",
    "nooffer",
];

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("ontology io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ontology parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported ontology schema {0:?}, expected {ONTOLOGY_SCHEMA:?}")]
    Schema(String),
    #[error("invalid ontology: {0}")]
    Invalid(String),
}

/// A `(domain, slot)` pair. Serialized as the string `domain/slot` so it can
/// key JSON maps.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl SlotKey {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
        }
    }
}

impl Serialize for SlotKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{}/{}", self.domain, self.slot))
    }
}

impl<'de> Deserialize<'de> for SlotKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let (domain, slot) = text
            .split_once('/')
            .ok_or_else(|| serde::de::Error::custom(format!("bad slot key {text:?}")))?;
        Ok(Self::new(domain, slot))
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

/// A slot of a domain. The slot is informable iff its value inventory is non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub name: String,
    #[serde(default)]
    pub values: Vec<String>,
    #[serde(default)]
    pub requestable: bool,
}

impl SlotSpec {
    pub fn informable(&self) -> bool {
        !self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub slots: Vec<SlotSpec>,
}

impl DomainSpec {
    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn informable(&self) -> impl Iterator<Item = &SlotSpec> {
        self.slots.iter().filter(|s| s.informable())
    }

    pub fn requestable(&self) -> impl Iterator<Item = &str> {
        self.slots
            .iter()
            .filter(|s| s.requestable)
            .map(|s| s.name.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ontology {
    pub schema: String,
    pub domains: Vec<DomainSpec>,
    pub general_intents: Vec<String>,
    pub domain_specific_intents: Vec<String>,
}

impl Ontology {
    /// Builds and validates an ontology with the default intent inventory.
    pub fn new(domains: Vec<DomainSpec>) -> Result<Self, OntologyError> {
        let ontology = Self {
            schema: ONTOLOGY_SCHEMA.to_string(),
            domains,
            general_intents: DEFAULT_GENERAL_INTENTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            domain_specific_intents: DEFAULT_DOMAIN_SPECIFIC_INTENTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        ontology.validate()?;
        Ok(ontology)
    }

    pub fn from_json_str(text: &str) -> Result<Self, OntologyError> {
        let ontology: Self = serde_json::from_str(text)?;
        ontology.validate()?;
        Ok(ontology)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ontology serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OntologyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), OntologyError> {
        if self.schema != ONTOLOGY_SCHEMA {
            return Err(OntologyError::Schema(self.schema.clone()));
        }
        let mut seen = BTreeSet::new();
        for domain in &self.domains {
            if domain.name == GENERAL || domain.name.is_empty() || domain.name.contains('/') {
                return Err(OntologyError::Invalid(format!(
                    "illegal domain name {:?}",
                    domain.name
                )));
            }
            if !seen.insert(domain.name.as_str()) {
                return Err(OntologyError::Invalid(format!(
                    "duplicate domain {:?}",
                    domain.name
                )));
            }
            let mut slots = BTreeSet::new();
            for slot in &domain.slots {
                if !slots.insert(slot.name.as_str()) {
                    return Err(OntologyError::Invalid(format!(
                        "duplicate slot {:?} in domain {:?}",
                        slot.name, domain.name
                    )));
                }
                if !slot.informable() && !slot.requestable {
                    return Err(OntologyError::Invalid(format!(
                        "slot {}-{} is neither informable nor requestable",
                        domain.name, slot.name
                    )));
                }
                let mut values = BTreeSet::new();
                for value in &slot.values {
                    if value == DONTCARE || value == REQUESTED || value.is_empty() {
                        return Err(OntologyError::Invalid(format!(
                            "reserved or empty value {:?} in {}-{}",
                            value, domain.name, slot.name
                        )));
                    }
                    if !values.insert(value.as_str()) {
                        return Err(OntologyError::Invalid(format!(
                            "duplicate value {:?} in {}-{}",
                            value, domain.name, slot.name
                        )));
                    }
                }
            }
        }
        for (label, list) in [
            ("general_intents", &self.general_intents),
            ("domain_specific_intents", &self.domain_specific_intents),
        ] {
            let unique: BTreeSet<_> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(OntologyError::Invalid(format!(
                    "{label} contains duplicates"
                )));
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn slot(&self, key: &SlotKey) -> Option<&SlotSpec> {
        self.domain(&key.domain).and_then(|d| d.slot(&key.slot))
    }

    pub fn n_gen(&self) -> usize {
        self.general_intents.len()
    }

    pub fn n_spec(&self) -> usize {
        self.domain_specific_intents.len()
    }

    pub fn general_intent_index(&self, intent: &str) -> Option<usize> {
        self.general_intents.iter().position(|i| i == intent)
    }

    pub fn spec_intent_index(&self, intent: &str) -> Option<usize> {
        self.domain_specific_intents
            .iter()
            .position(|i| i == intent)
    }

    /// Largest number of slots in any domain.
    pub fn max_slots(&self) -> usize {
        self.domains
            .iter()
            .map(|d| d.slots.len())
            .max()
            .unwrap_or(0)
    }

    /// Every slot key in ontology order.
    pub fn slot_keys(&self) -> Vec<SlotKey> {
        self.domains
            .iter()
            .flat_map(|d| d.slots.iter().map(move |s| SlotKey::new(&d.name, &s.name)))
            .collect()
    }

    /// Stable digest of everything a trained feature layout depends on:
    /// intent order plus domain and slot names in order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"general:");
        for intent in &self.general_intents {
            hasher.update(intent.as_bytes());
            hasher.update(b"\x1f");
        }
        hasher.update(b"specific:");
        for intent in &self.domain_specific_intents {
            hasher.update(intent.as_bytes());
            hasher.update(b"\x1f");
        }
        for domain in &self.domains {
            hasher.update(b"domain:");
            hasher.update(domain.name.as_bytes());
            for slot in &domain.slots {
                hasher.update(b"\x1e");
                hasher.update(slot.name.as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Copy of the ontology without one domain.
    pub fn without_domain(&self, domain: &str) -> Self {
        let mut out = self.clone();
        out.domains.retain(|d| d.name != domain);
        out
    }

    /// The bundled three-domain fixture. Area and price range are shared by
    /// the two venue domains; transit carries its own time slots.
    pub fn toy() -> Self {
        fn informable(name: &str, values: &[&str]) -> SlotSpec {
            SlotSpec {
                name: name.to_string(),
                values: values.iter().map(|v| v.to_string()).collect(),
                requestable: true,
            }
        }
        fn constraint_only(name: &str, values: &[&str]) -> SlotSpec {
            SlotSpec {
                requestable: false,
                ..informable(name, values)
            }
        }
        fn requestable(name: &str) -> SlotSpec {
            SlotSpec {
                name: name.to_string(),
                values: Vec::new(),
                requestable: true,
            }
        }
        let areas = ["north", "south", "east", "west", "centre"];
        let prices = ["cheap", "moderate", "expensive"];
        let towns = ["cambridge", "london", "ely", "norwich"];
        let domains = vec![
            DomainSpec {
                name: "lodging".into(),
                slots: vec![
                    informable("area", &areas),
                    informable("pricerange", &prices),
                    informable("stars", &["2", "3", "4", "5"]),
                    informable("parking", &["yes", "no"]),
                    requestable(ENTITY_SLOT),
                    requestable(BOOKING_SLOT),
                ],
            },
            DomainSpec {
                name: "eatery".into(),
                slots: vec![
                    informable("area", &areas),
                    informable("pricerange", &prices),
                    informable(
                        "food",
                        &["italian", "chinese", "indian", "british", "french"],
                    ),
                    requestable(ENTITY_SLOT),
                    requestable("phone"),
                    requestable(BOOKING_SLOT),
                ],
            },
            DomainSpec {
                name: "transit".into(),
                slots: vec![
                    constraint_only("departure", &towns),
                    constraint_only("destination", &towns),
                    constraint_only("leaveat", &["08:00", "10:00", "12:00", "14:00", "16:00"]),
                    requestable(ENTITY_SLOT),
                    requestable("duration"),
                    requestable("price"),
                ],
            },
        ];
        Self::new(domains).expect("toy ontology is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_round_trips_through_json() {
        let toy = Ontology::toy();
        let back = Ontology::from_json_str(&toy.to_json()).unwrap();
        assert_eq!(toy, back);
        assert_eq!(toy.fingerprint(), back.fingerprint());
        assert_eq!(toy.n_gen(), 5);
        assert_eq!(toy.n_spec(), 9);
    }

    #[test]
    fn reserved_values_are_rejected() {
        let mut toy = Ontology::toy();
        toy.domains[0].slots[0].values.push(DONTCARE.into());
        assert!(matches!(toy.validate(), Err(OntologyError::Invalid(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut toy = Ontology::toy();
        let dup = toy.domains[0].clone();
        toy.domains.push(dup);
        assert!(toy.validate().is_err());

        let mut toy = Ontology::toy();
        let dup = toy.domains[1].slots[0].clone();
        toy.domains[1].slots.push(dup);
        assert!(toy.validate().is_err());

        let mut toy = Ontology::toy();
        toy.general_intents.push("bye".into());
        assert!(toy.validate().is_err());
    }

    #[test]
    fn unknown_keys_and_wrong_schema_fail() {
        let text = Ontology::toy()
            .to_json()
            .replace("ontology/1", "ontology/0");
        assert!(matches!(
            Ontology::from_json_str(&text),
            Err(OntologyError::Schema(_))
        ));
        let text = r#"{"schema":"ontology/1","domains":[],"general_intents":[],"domain_specific_intents":[],"extra":1}"#;
        assert!(Ontology::from_json_str(text).is_err());
    }

    #[test]
    fn fingerprint_tracks_intent_order() {
        let toy = Ontology::toy();
        let mut shorter = toy.clone();
        shorter.domain_specific_intents.pop();
        assert_ne!(toy.fingerprint(), shorter.fingerprint());
        let mut swapped = toy.clone();
        swapped.general_intents.swap(0, 1);
        assert_ne!(toy.fingerprint(), swapped.fingerprint());
    }
}
