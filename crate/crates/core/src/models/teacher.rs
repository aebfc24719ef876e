use serde::{Deserialize, Serialize};

use super::layers::{embedding, prefixed, LinearLayer, MlpEncoder};
use super::{classifier_differentiable, softmax_xent, Classifier, ModelConfig, ModelError, Parameterized};
use crate::datamodel::{DatasetSchema, EntityPair, Label, Modality, View, ViewSpec};
use crate::linalg::Matrix;
use crate::rng::Stream;

/// Scores a synthetic view given only the entity pair. It has no input for
/// the real view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub v_spec: ViewSpec,
    pub entity_emb: Matrix,
    pub view_encoder: MlpEncoder,
    /// Applied to `[subject emb, object emb, view encoding]`.
    pub fusion: MlpEncoder,
    pub head: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub features: Vec<f64>,
    pub entities: EntityPair,
}

impl TeacherSample {
    pub fn from_view(view: &View, entities: EntityPair, spec: &ViewSpec) -> Result<Self, ModelError> {
        if view.modality != Modality::V {
            return Err(ModelError::WrongModality { expected: Modality::V, found: view.modality });
        }
        if !view.data.matches(spec) {
            return Err(ModelError::DimensionMismatch(format!("view does not match {spec}")));
        }
        Ok(Self { features: view.data.features(spec), entities })
    }
}

impl TeacherModel {
    pub fn new(schema: &DatasetSchema, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let fusion_in = 2 * cfg.entity_dim + cfg.encoding;
        Self {
            v_spec: schema.v_spec,
            entity_emb: embedding(schema.entity_vocab, cfg.entity_dim, rng),
            view_encoder: MlpEncoder::new(schema.v_spec.feature_dim(), cfg.hidden, cfg.encoding, rng),
            fusion: MlpEncoder::new(fusion_in, cfg.hidden, cfg.hidden, rng),
            head: LinearLayer::new(cfg.hidden, schema.class_count, rng),
        }
    }

    /// Every parameter zero; produces uniform logits.
    pub fn zeros(schema: &DatasetSchema, cfg: &ModelConfig) -> Self {
        Self {
            v_spec: schema.v_spec,
            entity_emb: Matrix::zeros(schema.entity_vocab, cfg.entity_dim),
            view_encoder: MlpEncoder::zeros(schema.v_spec.feature_dim(), cfg.hidden, cfg.encoding),
            fusion: MlpEncoder::zeros(2 * cfg.entity_dim + cfg.encoding, cfg.hidden, cfg.hidden),
            head: LinearLayer::zeros(cfg.hidden, schema.class_count),
        }
    }

    fn entity_rows(&self, e: EntityPair) -> Result<(&[f64], &[f64]), ModelError> {
        let n = self.entity_emb.rows as u32;
        if e.subject >= n || e.object >= n {
            return Err(ModelError::DimensionMismatch("entity id outside embedding table".into()));
        }
        Ok((self.entity_emb.row(e.subject as usize), self.entity_emb.row(e.object as usize)))
    }

    pub fn sample(&self, view: &View, entities: EntityPair) -> Result<TeacherSample, ModelError> {
        TeacherSample::from_view(view, entities, &self.v_spec)
    }
}

pub fn teacher_forward(view: &View, entities: EntityPair, model: &TeacherModel) -> Result<Vec<f64>, ModelError> {
    model.logits(&model.sample(view, entities)?)
}

impl Parameterized for TeacherModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("entity_emb".to_string(), &self.entity_emb)];
        v.extend(prefixed("view_encoder", self.view_encoder.tensors()));
        v.extend(prefixed("fusion", self.fusion.tensors()));
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.entity_emb];
        v.extend(self.view_encoder.tensors_mut());
        v.extend(self.fusion.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

impl Classifier for TeacherModel {
    type Input = TeacherSample;

    fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    fn logits(&self, x: &TeacherSample) -> Result<Vec<f64>, ModelError> {
        if x.features.len() != self.view_encoder.input_dim() {
            return Err(ModelError::DimensionMismatch("teacher view features".into()));
        }
        let (s, o) = self.entity_rows(x.entities)?;
        let enc = self.view_encoder.forward(&x.features);
        let fused_in: Vec<f64> = s.iter().chain(o).chain(&enc).copied().collect();
        Ok(self.head.forward(&self.fusion.forward(&fused_in)))
    }

    fn loss_grad(&self, x: &TeacherSample, label: Label, grad: &mut Self) -> Result<f64, ModelError> {
        if x.features.len() != self.view_encoder.input_dim() {
            return Err(ModelError::DimensionMismatch("teacher view features".into()));
        }
        let (s, o) = self.entity_rows(x.entities)?;
        let (enc_cache, enc) = self.view_encoder.forward_cached(&x.features);
        let fused_in: Vec<f64> = s.iter().chain(o).chain(&enc).copied().collect();
        let (fusion_cache, z) = self.fusion.forward_cached(&fused_in);
        let logits = self.head.forward(&z);
        let (loss, dlogits) = softmax_xent(&logits, label)?;
        let dz = self.head.backward(&z, &dlogits, &mut grad.head);
        let dfused = self.fusion.backward(&fused_in, &fusion_cache, &dz, &mut grad.fusion);
        let d = self.entity_emb.cols;
        grad.entity_emb.row_mut(x.entities.subject as usize).iter_mut().zip(&dfused[..d]).for_each(|(g, v)| *g += v);
        grad.entity_emb
            .row_mut(x.entities.object as usize)
            .iter_mut()
            .zip(&dfused[d..2 * d])
            .for_each(|(g, v)| *g += v);
        self.view_encoder.backward(&x.features, &enc_cache, &dfused[2 * d..], &mut grad.view_encoder);
        Ok(loss)
    }
}

classifier_differentiable!(TeacherModel, TeacherSample);
