//! Named-tensor checkpoints. Loading writes into a freshly built model of
//! the right architecture and refuses anything whose names or shapes differ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Parameterized;

const FORMAT: &str = "synthcurate-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format} v{version}")]
    Version { format: String, version: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { expected: String, found: String },
    #[error("tensor mismatch at {0}")]
    Tensor(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<M: Parameterized>(kind: &str, model: &M) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord { name, shape: [t.rows, t.cols], data: t.data.clone() })
            .collect();
        Self { format: FORMAT.into(), version: VERSION, kind: kind.into(), tensors }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(CheckpointError::Version { format: c.format, version: c.version });
        }
        Ok(c)
    }

    /// Copies the stored tensors into `template`, which fixes the architecture.
    pub fn restore<M: Parameterized>(&self, kind: &str, mut template: M) -> Result<M, CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind { expected: kind.into(), found: self.kind.clone() });
        }
        let names: Vec<String> = template.tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.tensors.len() {
            return Err(CheckpointError::Tensor(format!("count {} vs {}", self.tensors.len(), names.len())));
        }
        for ((name, slot), rec) in names.iter().zip(template.tensors_mut()).zip(&self.tensors) {
            if *name != rec.name || [slot.rows, slot.cols] != rec.shape || rec.data.len() != slot.data.len() {
                return Err(CheckpointError::Tensor(rec.name.clone()));
            }
            slot.data.copy_from_slice(&rec.data);
        }
        Ok(template)
    }
}
