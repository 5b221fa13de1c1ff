//! Domain-independent transformer user simulator toolkit.

pub mod abus;
pub mod act;
pub mod corpus;
pub mod db;
pub mod encoder;
pub mod eval;
pub mod experiments;
pub mod goal;
pub mod nn;
pub mod ontology;
pub mod rl;
pub mod rules;
pub mod sim;
pub mod state;
pub mod tus;

pub use act::{ActError, DialogueAct, Speaker};
pub use goal::{sample_goal, DomainGoal, GoalConfig, GoalError, SlotRole, UserGoal};
pub use ontology::{DomainSpec, Ontology, OntologyError, SlotKey, SlotSpec};
pub use state::{mark_fulfilled, DialogueState, TurnRecord};
