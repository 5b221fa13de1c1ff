//! Transformer encoder with slot and domain heads, trained with hand-written
//! backpropagation at 64-bit precision.

mod adam;
mod checkpoint;
mod model;
mod ops;
mod params;

pub use adam::Adam;
pub use checkpoint::{
    read_container, write_container, Checkpoint, ContainerHeader, RngState, TensorEntry,
    CHECKPOINT_MAGIC, NET_SCHEMA,
};
pub use model::{example_loss, Batch, Example, ForwardOutput, Network, StepStats};
pub use ops::{log_softmax, position_encoding, sigmoid};
pub use params::{ParamSet, TensorSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::N_CLASSES;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input width {found} does not match the network's {expected}")]
    Width { expected: usize, found: usize },
    #[error("target class {0} is outside 0..6")]
    Target(usize),
    #[error("{expected} targets expected, got {found}")]
    TargetCount { expected: usize, found: usize },
    #[error("non-finite loss {loss} at step {step}: {detail}")]
    NonFinite {
        loss: f64,
        step: usize,
        detail: String,
    },
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint was built for ontology {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub slot_classes: usize,
    pub domain_head_dim: usize,
    pub learning_rate: f64,
    /// Include the domain BCE term in the loss.
    pub domain_loss: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 100,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 400,
            dropout: 0.1,
            slot_classes: N_CLASSES,
            domain_head_dim: crate::goal::DEFAULT_MAX_DOMAINS,
            learning_rate: 5e-4,
            domain_loss: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.ff_dim == 0 || self.n_layers == 0 {
            return fail("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.slot_classes != N_CLASSES {
            return fail(format!("slot_classes must be {N_CLASSES}"));
        }
        if self.domain_head_dim == 0 {
            return fail("domain_head_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} is invalid", self.learning_rate));
        }
        Ok(())
    }
}
