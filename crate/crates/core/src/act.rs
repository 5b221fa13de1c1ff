//! Semantic dialogue acts and their validation against an ontology.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{
    Ontology, SlotKey, DONTCARE, GENERAL, REQUESTED, USER_GENERAL_INTENTS, USER_INFORM,
    USER_REQUEST,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActError {
    #[error("unknown {speaker:?} intent {intent:?}")]
    UnknownIntent { speaker: Speaker, intent: String },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown slot {0}")]
    UnknownSlot(SlotKey),
    #[error("general act {0} must not carry a slot or value")]
    GeneralWithSlot(String),
    #[error("act {0} is missing a slot")]
    MissingSlot(String),
    #[error("act {0} is missing a value")]
    MissingValue(String),
    #[error("value {value:?} not in the inventory of {key}")]
    UnknownValue { key: SlotKey, value: String },
    #[error("slot {0} cannot be requested")]
    NotRequestable(SlotKey),
    #[error("slot {0} cannot be informed by the user")]
    NotInformable(SlotKey),
    #[error("cannot parse act {0:?}")]
    Parse(String),
}

/// One `(intent, domain, slot, value)` tuple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DialogueAct {
    pub intent: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl DialogueAct {
    pub fn general(intent: impl Into<String>) -> Self {
        Self {
            intent: intent.into(),
            domain: GENERAL.to_string(),
            slot: None,
            value: None,
        }
    }

    pub fn new(
        intent: impl Into<String>,
        domain: impl Into<String>,
        slot: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            intent: intent.into(),
            domain: domain.into(),
            slot: Some(slot.into()),
            value: Some(value.into()),
        }
    }

    pub fn inform(key: &SlotKey, value: impl Into<String>) -> Self {
        Self::new(USER_INFORM, &key.domain, &key.slot, value)
    }

    pub fn request(key: &SlotKey) -> Self {
        Self::new(USER_REQUEST, &key.domain, &key.slot, REQUESTED)
    }

    pub fn is_general(&self) -> bool {
        self.domain == GENERAL
    }

    pub fn key(&self) -> Option<SlotKey> {
        self.slot
            .as_ref()
            .map(|slot| SlotKey::new(&self.domain, slot))
    }

    /// Parses the interactive mini-grammar: `general.reqmore`, or
    /// `<intent> <domain> [<slot>[=<value>]]`. A slot without a value on a
    /// request means `?`.
    pub fn parse_command(line: &str) -> Result<Self, ActError> {
        let line = line.trim();
        let err = || ActError::Parse(line.to_string());
        if let Some(intent) = line.strip_prefix("general.") {
            if intent.is_empty() || intent.contains(char::is_whitespace) {
                return Err(err());
            }
            return Ok(Self::general(intent));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [intent, domain] => Ok(Self {
                intent: intent.to_string(),
                domain: domain.to_string(),
                slot: None,
                value: None,
            }),
            [intent, domain, slot_value] => {
                let (slot, value) = match slot_value.split_once('=') {
                    Some((slot, value)) if !slot.is_empty() && !value.is_empty() => {
                        (slot.to_string(), Some(value.to_string()))
                    }
                    Some(_) => return Err(err()),
                    None if *intent == USER_REQUEST => {
                        (slot_value.to_string(), Some(REQUESTED.to_string()))
                    }
                    None => (slot_value.to_string(), None),
                };
                Ok(Self {
                    intent: intent.to_string(),
                    domain: domain.to_string(),
                    slot: Some(slot),
                    value,
                })
            }
            _ => Err(err()),
        }
    }
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.slot, &self.value) {
            (None, _) => write!(f, "{}-{}()", self.domain, self.intent),
            (Some(slot), None) => write!(f, "{}({}-{})", self.intent, self.domain, slot),
            (Some(slot), Some(value)) => {
                write!(f, "{}({}-{}={})", self.intent, self.domain, slot, value)
            }
        }
    }
}

impl Ontology {
    /// Checks an act against the ontology for the given speaker.
    pub fn validate_act(&self, act: &DialogueAct, speaker: Speaker) -> Result<(), ActError> {
        if act.is_general() {
            let known = match speaker {
                Speaker::User => USER_GENERAL_INTENTS.contains(&act.intent.as_str()),
                Speaker::System => self.general_intent_index(&act.intent).is_some(),
            };
            if !known {
                return Err(ActError::UnknownIntent {
                    speaker,
                    intent: act.intent.clone(),
                });
            }
            if act.slot.is_some() || act.value.is_some() {
                return Err(ActError::GeneralWithSlot(act.to_string()));
            }
            return Ok(());
        }
        let known = match speaker {
            Speaker::User => act.intent == USER_INFORM || act.intent == USER_REQUEST,
            Speaker::System => self.spec_intent_index(&act.intent).is_some(),
        };
        if !known {
            return Err(ActError::UnknownIntent {
                speaker,
                intent: act.intent.clone(),
            });
        }
        let domain = self
            .domain(&act.domain)
            .ok_or_else(|| ActError::UnknownDomain(act.domain.clone()))?;
        let Some(slot_name) = &act.slot else {
            if speaker == Speaker::User {
                return Err(ActError::MissingSlot(act.to_string()));
            }
            if act.value.is_some() {
                return Err(ActError::MissingSlot(act.to_string()));
            }
            return Ok(());
        };
        let key = SlotKey::new(&act.domain, slot_name);
        let slot = domain
            .slot(slot_name)
            .ok_or_else(|| ActError::UnknownSlot(key.clone()))?;
        let is_request = act.intent == USER_REQUEST;
        match (speaker, is_request) {
            (_, true) => {
                if speaker == Speaker::User && !slot.requestable {
                    return Err(ActError::NotRequestable(key));
                }
                if speaker == Speaker::System && !slot.informable() {
                    return Err(ActError::NotInformable(key));
                }
                match act.value.as_deref() {
                    None | Some(REQUESTED) => Ok(()),
                    Some(other) => Err(ActError::UnknownValue {
                        key,
                        value: other.to_string(),
                    }),
                }
            }
            (Speaker::User, false) => {
                if !slot.informable() {
                    return Err(ActError::NotInformable(key));
                }
                let value = act
                    .value
                    .as_deref()
                    .ok_or_else(|| ActError::MissingValue(act.to_string()))?;
                if value == DONTCARE || slot.values.iter().any(|v| v == value) {
                    Ok(())
                } else {
                    Err(ActError::UnknownValue {
                        key,
                        value: value.to_string(),
                    })
                }
            }
            (Speaker::System, false) => match act.value.as_deref() {
                None => Ok(()),
                Some(REQUESTED) | Some("") => Err(ActError::UnknownValue {
                    key,
                    value: act.value.clone().unwrap_or_default(),
                }),
                Some(value) => {
                    if !slot.informable()
                        || value == DONTCARE
                        || slot.values.iter().any(|v| v == value)
                    {
                        Ok(())
                    } else {
                        Err(ActError::UnknownValue {
                            key,
                            value: value.to_string(),
                        })
                    }
                }
            },
        }
    }

    pub fn validate_acts(&self, acts: &[DialogueAct], speaker: Speaker) -> Result<(), ActError> {
        acts.iter().try_for_each(|a| self.validate_act(a, speaker))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Ontology {
        Ontology::toy()
    }

    #[test]
    fn user_acts_validate() {
        let o = toy();
        let area = SlotKey::new("lodging", "area");
        assert!(o
            .validate_act(&DialogueAct::inform(&area, "north"), Speaker::User)
            .is_ok());
        assert!(o
            .validate_act(&DialogueAct::inform(&area, DONTCARE), Speaker::User)
            .is_ok());
        assert!(matches!(
            o.validate_act(&DialogueAct::inform(&area, "mars"), Speaker::User),
            Err(ActError::UnknownValue { .. })
        ));
        let name = SlotKey::new("lodging", "name");
        assert!(o
            .validate_act(&DialogueAct::request(&name), Speaker::User)
            .is_ok());
        assert!(matches!(
            o.validate_act(&DialogueAct::inform(&name, "x"), Speaker::User),
            Err(ActError::NotInformable(_))
        ));
        let leave = SlotKey::new("transit", "leaveat");
        assert!(matches!(
            o.validate_act(&DialogueAct::request(&leave), Speaker::User),
            Err(ActError::NotRequestable(_))
        ));
        assert!(o
            .validate_act(&DialogueAct::general("bye"), Speaker::User)
            .is_ok());
        assert!(o
            .validate_act(&DialogueAct::general("reqmore"), Speaker::User)
            .is_err());
    }

    #[test]
    fn system_acts_validate() {
        let o = toy();
        let ok = [
            DialogueAct::new("recommend", "lodging", "name", "lodging-3"),
            DialogueAct::new("recommend", "lodging", "area", "south"),
            DialogueAct::new("request", "lodging", "pricerange", "?"),
            DialogueAct::general("reqmore"),
            DialogueAct {
                intent: "nooffer".into(),
                domain: "eatery".into(),
                slot: None,
                value: None,
            },
        ];
        for act in &ok {
            assert!(o.validate_act(act, Speaker::System).is_ok(), "{act}");
        }
        let bad = [
            DialogueAct::new("recommend", "lodging", "area", "mars"),
            DialogueAct::new("recommend", "spa", "area", "south"),
            DialogueAct::new("recommend", "lodging", "colour", "red"),
            DialogueAct::new("inform", "lodging", "area", "?"),
            DialogueAct::new("welcome", "lodging", "area", "south"),
            DialogueAct {
                slot: Some("x".into()),
                ..DialogueAct::general("reqmore")
            },
        ];
        for act in &bad {
            assert!(o.validate_act(act, Speaker::System).is_err(), "{act}");
        }
    }

    #[test]
    fn command_grammar() {
        assert_eq!(
            DialogueAct::parse_command("general.reqmore").unwrap(),
            DialogueAct::general("reqmore")
        );
        assert_eq!(
            DialogueAct::parse_command("recommend lodging area=south").unwrap(),
            DialogueAct::new("recommend", "lodging", "area", "south")
        );
        assert_eq!(
            DialogueAct::parse_command("request lodging stars").unwrap(),
            DialogueAct::new("request", "lodging", "stars", "?")
        );
        assert!(DialogueAct::parse_command("recommend").is_err());
        assert!(DialogueAct::parse_command("recommend lodging area=").is_err());
        assert!(DialogueAct::parse_command("general.").is_err());
    }

    #[test]
    fn display_matches_act_notation() {
        let act = DialogueAct::new("recommend", "lodging", "area", "south");
        assert_eq!(act.to_string(), "recommend(lodging-area=south)");
        assert_eq!(
            DialogueAct::general("reqmore").to_string(),
            "general-reqmore()"
        );
    }
}
