//! Small trainable networks with hand-written backpropagation.
//!
//! Every model exposes its parameters as an ordered list of named matrices
//! ([`Parameterized`]); gradients are stored in a value of the same type, so
//! the optimizer, the finite-difference checker and the checkpoint writer
//! are all generic over that one trait.

mod attention;
pub mod checkpoint;
mod gradcheck;
mod layers;
mod student;
mod teacher;
mod train;

pub use attention::{cross_attention, AttendCache, AttentionSample, BlockCache, CrossAttentionBlock};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport};
pub use layers::{LinearLayer, MlpCache, MlpEncoder};
pub use student::{student_forward, StudentInput, StudentModel, UnimodalInput, UnimodalModel};
pub use teacher::{teacher_forward, TeacherModel, TeacherSample};
pub use train::{train, AdamW, TrainConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Label, Modality};
use crate::linalg::{self, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty attention set")]
    EmptyAttentionSet,
    #[error("student needs at least one synthetic view")]
    EmptySyntheticSet,
    #[error("wrong modality: expected {expected}-side view, got {found}-side")]
    WrongModality { expected: Modality, found: Modality },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub trait Parameterized: Clone {
    /// Named parameter tensors in a fixed order.
    fn tensors(&self) -> Vec<(String, &Matrix)>;

    /// Same order as [`Parameterized::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn add_scaled(&mut self, scale: f64, other: &Self) {
        let theirs: Vec<Matrix> = other.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(&theirs) {
            mine.axpy(scale, t);
        }
    }

    /// FNV-1a over the parameter bit patterns.
    fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// A scalar objective with an analytic parameter gradient.
pub trait Differentiable: Parameterized {
    type Sample;

    fn objective(&self, sample: &Self::Sample) -> f64;

    fn objective_and_grad(&self, sample: &Self::Sample) -> (f64, Self);
}

/// A `C`-way classifier trainable with cross-entropy.
pub trait Classifier: Parameterized + Send + Sync {
    type Input: Send + Sync;

    fn class_count(&self) -> usize;

    fn logits(&self, input: &Self::Input) -> Result<Vec<f64>, ModelError>;

    /// Adds `∂loss/∂params` into `grad` and returns the loss.
    fn loss_grad(&self, input: &Self::Input, label: Label, grad: &mut Self) -> Result<f64, ModelError>;

    fn loss(&self, input: &Self::Input, label: Label) -> Result<f64, ModelError> {
        Ok(softmax_xent(&self.logits(input)?, label)?.0)
    }
}

/// Input/target pair for checking a layer in isolation under `½‖f(x) − t‖²`.
#[derive(Clone, Debug)]
pub struct RegressionSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// `(logsumexp(z) − z[y], softmax(z) − onehot(y))`.
pub fn softmax_xent(logits: &[f64], label: Label) -> Result<(f64, Vec<f64>), ModelError> {
    let y = label.index();
    if y >= logits.len() {
        return Err(ModelError::LabelOutOfRange { label: label.0, classes: logits.len() });
    }
    let raw = linalg::logsumexp(logits) - logits[y];
    // Rounding can leave a saturated loss a hair below zero; NaN passes through.
    let loss = if raw < 0.0 { 0.0 } else { raw };
    let mut grad = linalg::softmax(logits);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Architecture widths shared by teacher, student and unimodal models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoding: usize,
    pub entity_dim: usize,
    pub key_dim: usize,
    /// One attention block serves both queries when true.
    pub share_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 16, encoding: 8, entity_dim: 4, key_dim: 8, share_attention: true }
    }
}

macro_rules! classifier_differentiable {
    ($ty:ty, $input:ty) => {
        impl $crate::models::Differentiable for $ty {
            type Sample = ($input, $crate::datamodel::Label);

            fn objective(&self, s: &Self::Sample) -> f64 {
                $crate::models::Classifier::loss(self, &s.0, s.1).expect("valid sample")
            }

            fn objective_and_grad(&self, s: &Self::Sample) -> (f64, Self) {
                let mut g = $crate::models::Parameterized::zeros_like(self);
                let loss = $crate::models::Classifier::loss_grad(self, &s.0, s.1, &mut g).expect("valid sample");
                (loss, g)
            }
        }
    };
}
pub(crate) use classifier_differentiable;
