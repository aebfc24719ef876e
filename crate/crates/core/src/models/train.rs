use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Classifier, ModelError, Parameterized};
use crate::datamodel::Label;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            steps: 300,
            batch_size: 32,
            weight_decay: 1e-2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        if self.cosine_decay && self.steps > 0 {
            let t = step as f64 / self.steps as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<M> {
    first: M,
    second: M,
    t: i32,
}

impl<M: Parameterized> AdamW<M> {
    pub fn new(model: &M) -> Self {
        Self { first: model.zeros_like(), second: model.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, model: &mut M, grad: &M, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let grads: Vec<_> = grad.tensors().into_iter().map(|(_, g)| g).collect();
        let params = model.tensors_mut();
        let firsts = self.first.tensors_mut();
        let seconds = self.second.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(firsts).zip(seconds) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + cfg.epsilon) + cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Mini-batch AdamW training followed by a frozen pass over `data`.
///
/// Batches walk seeded per-epoch shuffles. Per-sample gradients may be
/// computed in parallel but are summed in batch order, so the result does
/// not depend on the thread count. The returned losses come from the final
/// parameters, one per sample in `data` order.
pub fn train<M: Classifier>(
    mut model: M,
    data: &[(M::Input, Label)],
    cfg: &TrainConfig,
) -> Result<(M, Vec<f64>), ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let mut rng = rng::stream(cfg.seed, "train-order", &[]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(&model);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let per_sample: Vec<Result<(f64, M), ModelError>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = model.zeros_like();
                let loss = model.loss_grad(&data[i].0, data[i].1, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        let mut total = model.zeros_like();
        let inv = 1.0 / batch.len() as f64;
        for r in per_sample {
            let (loss, g) = r?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            total.add_scaled(inv, &g);
        }
        opt.step(&mut model, &total, cfg.rate_at(step), cfg);
        if !model.is_finite() {
            return Err(ModelError::NonFiniteLoss { step });
        }
    }
    let losses = final_losses(&model, data)?;
    Ok((model, losses))
}

/// Per-sample losses under frozen parameters.
pub(crate) fn final_losses<M: Classifier>(model: &M, data: &[(M::Input, Label)]) -> Result<Vec<f64>, ModelError> {
    data.par_iter().map(|(x, y)| model.loss(x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DatasetSchema, EntityPair, ViewSpec};
    use crate::models::{ModelConfig, TeacherModel, TeacherSample};

    fn toy() -> (TeacherModel, Vec<(TeacherSample, Label)>) {
        let schema = DatasetSchema {
            class_count: 2,
            entity_vocab: 2,
            u_spec: ViewSpec::Vector { dim: 2 },
            v_spec: ViewSpec::Vector { dim: 2 },
            none_class: None,
        };
        let model = TeacherModel::new(&schema, &ModelConfig::default(), &mut rng::seeded(4));
        let e = EntityPair { subject: 0, object: 1 };
        let data = (0..40)
            .map(|i| {
                let y = i % 2;
                let s = if y == 0 { -1.0 } else { 1.0 };
                let jitter = (i as f64 * 0.37).sin() * 0.3;
                (TeacherSample { features: vec![s + jitter, 0.5 * jitter], entities: e }, Label(y as u32))
            })
            .collect();
        (model, data)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (model, data) = toy();
        let cfg = TrainConfig { steps: 200, batch_size: 8, learning_rate: 0.02, ..Default::default() };
        let (trained, losses) = train(model, &data, &cfg).unwrap();
        let correct =
            data.iter().filter(|(x, y)| crate::linalg::argmax(&trained.logits(x).unwrap()) == y.index()).count();
        assert_eq!(correct, data.len());
        assert!(losses.iter().all(|l| *l < 0.3));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (model, data) = toy();
        let initial = final_losses(&model, &data).unwrap();
        let cfg = TrainConfig { steps: 20, learning_rate: 0.0, ..Default::default() };
        let (trained, losses) = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(losses, initial);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = toy();
        let cfg = TrainConfig { steps: 30, ..Default::default() };
        let a = train(model.clone(), &data, &cfg).unwrap().0;
        let b = train(model, &data, &cfg).unwrap().0;
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let (model, mut data) = toy();
        data[3].0.features[0] = f64::NAN;
        let cfg = TrainConfig { steps: 5, batch_size: 40, ..Default::default() };
        assert_eq!(train(model, &data, &cfg).unwrap_err(), ModelError::NonFiniteLoss { step: 0 });
    }

    #[test]
    fn empty_data_is_rejected() {
        let (model, _) = toy();
        assert_eq!(train(model, &[], &TrainConfig::default()).unwrap_err(), ModelError::EmptyData);
    }
}
