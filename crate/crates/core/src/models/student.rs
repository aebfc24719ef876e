use serde::{Deserialize, Serialize};

use super::attention::CrossAttentionBlock;
use super::layers::{embedding, prefixed, LinearLayer, MlpEncoder};
use super::{classifier_differentiable, softmax_xent, Classifier, ModelConfig, ModelError, Parameterized};
use crate::datamodel::{DatasetSchema, EntityPair, Label, Modality, View, ViewSpec};
use crate::linalg::Matrix;
use crate::rng::Stream;

/// Fuses one real view with a set of synthetic views.
///
/// Subject and object queries are built from the real-view encoding and the
/// respective entity embedding; each attends over the encoded synthetic set
/// and the two read-outs are concatenated into a linear classifier. Nothing
/// in the synthetic branch sees a position, so the logits are a function of
/// the set, not the sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub u_spec: ViewSpec,
    pub v_spec: ViewSpec,
    pub real_encoder: MlpEncoder,
    pub entity_emb: Matrix,
    pub synth_encoder: MlpEncoder,
    pub subject_query: LinearLayer,
    pub object_query: LinearLayer,
    pub attention: CrossAttentionBlock,
    /// Separate block for the object query when attention is not shared.
    pub object_attention: Option<CrossAttentionBlock>,
    pub head: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentInput {
    pub real: Vec<f64>,
    pub synth: Vec<Vec<f64>>,
    pub entities: EntityPair,
}

impl StudentModel {
    pub fn new(schema: &DatasetSchema, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let d = cfg.encoding;
        let attention = CrossAttentionBlock::new(d, cfg.key_dim, cfg.encoding, cfg.hidden, rng);
        let object_attention =
            (!cfg.share_attention).then(|| CrossAttentionBlock::new(d, cfg.key_dim, cfg.encoding, cfg.hidden, rng));
        Self {
            u_spec: schema.u_spec,
            v_spec: schema.v_spec,
            real_encoder: MlpEncoder::new(schema.u_spec.feature_dim(), cfg.hidden, d, rng),
            entity_emb: embedding(schema.entity_vocab, cfg.entity_dim, rng),
            synth_encoder: MlpEncoder::new(schema.v_spec.feature_dim(), cfg.hidden, cfg.encoding, rng),
            subject_query: LinearLayer::new(d + cfg.entity_dim, d, rng),
            object_query: LinearLayer::new(d + cfg.entity_dim, d, rng),
            attention,
            object_attention,
            head: LinearLayer::new(2 * d, schema.class_count, rng),
        }
    }

    fn object_block(&self) -> &CrossAttentionBlock {
        self.object_attention.as_ref().unwrap_or(&self.attention)
    }

    /// Featurize views into a model input, checking modalities.
    pub fn input(&self, real: &View, synth: &[View], entities: EntityPair) -> Result<StudentInput, ModelError> {
        if real.modality != Modality::U {
            return Err(ModelError::WrongModality { expected: Modality::U, found: real.modality });
        }
        if synth.is_empty() {
            return Err(ModelError::EmptySyntheticSet);
        }
        let mut feats = Vec::with_capacity(synth.len());
        for v in synth {
            if v.modality != Modality::V {
                return Err(ModelError::WrongModality { expected: Modality::V, found: v.modality });
            }
            if !v.data.matches(&self.v_spec) {
                return Err(ModelError::DimensionMismatch(format!("synthetic view does not match {}", self.v_spec)));
            }
            feats.push(v.data.features(&self.v_spec));
        }
        if !real.data.matches(&self.u_spec) {
            return Err(ModelError::DimensionMismatch(format!("real view does not match {}", self.u_spec)));
        }
        Ok(StudentInput { real: real.data.features(&self.u_spec), synth: feats, entities })
    }

    fn check(&self, x: &StudentInput) -> Result<(), ModelError> {
        if x.synth.is_empty() {
            return Err(ModelError::EmptySyntheticSet);
        }
        if x.real.len() != self.real_encoder.input_dim()
            || x.synth.iter().any(|s| s.len() != self.synth_encoder.input_dim())
        {
            return Err(ModelError::DimensionMismatch("student input features".into()));
        }
        let n = self.entity_emb.rows as u32;
        if x.entities.subject >= n || x.entities.object >= n {
            return Err(ModelError::DimensionMismatch("entity id outside embedding table".into()));
        }
        Ok(())
    }

    fn query_input(&self, r: &[f64], entity: u32) -> Vec<f64> {
        r.iter().chain(self.entity_emb.row(entity as usize)).copied().collect()
    }
}

pub fn student_forward(
    real_view: &View,
    synth_views: &[View],
    entities: EntityPair,
    model: &StudentModel,
) -> Result<Vec<f64>, ModelError> {
    model.logits(&model.input(real_view, synth_views, entities)?)
}

impl Parameterized for StudentModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = prefixed("real_encoder", self.real_encoder.tensors());
        v.push(("entity_emb".into(), &self.entity_emb));
        v.extend(prefixed("synth_encoder", self.synth_encoder.tensors()));
        v.extend(prefixed("subject_query", self.subject_query.tensors()));
        v.extend(prefixed("object_query", self.object_query.tensors()));
        v.extend(prefixed("attention", self.attention.tensors()));
        if let Some(b) = &self.object_attention {
            v.extend(prefixed("object_attention", b.tensors()));
        }
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.real_encoder.tensors_mut();
        v.push(&mut self.entity_emb);
        v.extend(self.synth_encoder.tensors_mut());
        v.extend(self.subject_query.tensors_mut());
        v.extend(self.object_query.tensors_mut());
        v.extend(self.attention.tensors_mut());
        if let Some(b) = &mut self.object_attention {
            v.extend(b.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        v
    }
}

impl Classifier for StudentModel {
    type Input = StudentInput;

    fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    fn logits(&self, x: &StudentInput) -> Result<Vec<f64>, ModelError> {
        self.check(x)?;
        let r = self.real_encoder.forward(&x.real);
        let q_s = self.subject_query.forward(&self.query_input(&r, x.entities.subject));
        let q_o = self.object_query.forward(&self.query_input(&r, x.entities.object));
        let memory: Vec<Vec<f64>> = x.synth.iter().map(|s| self.synth_encoder.forward(s)).collect();
        let a_s = self.attention.forward(&q_s, &memory)?;
        let a_o = self.object_block().forward(&q_o, &memory)?;
        let z: Vec<f64> = a_s.into_iter().chain(a_o).collect();
        Ok(self.head.forward(&z))
    }

    fn loss_grad(&self, x: &StudentInput, label: Label, grad: &mut Self) -> Result<f64, ModelError> {
        self.check(x)?;
        let (r_cache, r) = self.real_encoder.forward_cached(&x.real);
        let qs_in = self.query_input(&r, x.entities.subject);
        let qo_in = self.query_input(&r, x.entities.object);
        let q_s = self.subject_query.forward(&qs_in);
        let q_o = self.object_query.forward(&qo_in);
        let encoded: Vec<_> = x.synth.iter().map(|s| self.synth_encoder.forward_cached(s)).collect();
        let memory: Vec<Vec<f64>> = encoded.iter().map(|(_, m)| m.clone()).collect();
        let (bc_s, a_s) = self.attention.forward_cached(&q_s, &memory)?;
        let (bc_o, a_o) = self.object_block().forward_cached(&q_o, &memory)?;
        let d = a_s.len();
        let z: Vec<f64> = a_s.into_iter().chain(a_o).collect();
        let logits = self.head.forward(&z);
        let (loss, dlogits) = softmax_xent(&logits, label)?;

        let dz = self.head.backward(&z, &dlogits, &mut grad.head);
        let (dq_s, dmem_s) = self.attention.backward(&q_s, &memory, &bc_s, &dz[..d], &mut grad.attention);
        let (dq_o, dmem_o) = match (&self.object_attention, &mut grad.object_attention) {
            (Some(b), Some(g)) => b.backward(&q_o, &memory, &bc_o, &dz[d..], g),
            _ => self.attention.backward(&q_o, &memory, &bc_o, &dz[d..], &mut grad.attention),
        };

        let dqs_in = self.subject_query.backward(&qs_in, &dq_s, &mut grad.subject_query);
        let dqo_in = self.object_query.backward(&qo_in, &dq_o, &mut grad.object_query);
        let dr: Vec<f64> = dqs_in[..d].iter().zip(&dqo_in[..d]).map(|(a, b)| a + b).collect();
        grad.entity_emb.row_mut(x.entities.subject as usize).iter_mut().zip(&dqs_in[d..]).for_each(|(g, v)| *g += v);
        grad.entity_emb.row_mut(x.entities.object as usize).iter_mut().zip(&dqo_in[d..]).for_each(|(g, v)| *g += v);
        self.real_encoder.backward(&x.real, &r_cache, &dr, &mut grad.real_encoder);

        for (i, ((cache, _), s)) in encoded.iter().zip(&x.synth).enumerate() {
            let dm: Vec<f64> = dmem_s[i].iter().zip(&dmem_o[i]).map(|(a, b)| a + b).collect();
            self.synth_encoder.backward(s, cache, &dm, &mut grad.synth_encoder);
        }
        Ok(loss)
    }
}

classifier_differentiable!(StudentModel, StudentInput);

/// The student without its synthetic branch: real-view encoder, entity
/// embeddings and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnimodalModel {
    pub u_spec: ViewSpec,
    pub real_encoder: MlpEncoder,
    pub entity_emb: Matrix,
    pub head: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalInput {
    pub real: Vec<f64>,
    pub entities: EntityPair,
}

impl UnimodalModel {
    pub fn new(schema: &DatasetSchema, cfg: &ModelConfig, rng: &mut Stream) -> Self {
        Self {
            u_spec: schema.u_spec,
            real_encoder: MlpEncoder::new(schema.u_spec.feature_dim(), cfg.hidden, cfg.encoding, rng),
            entity_emb: embedding(schema.entity_vocab, cfg.entity_dim, rng),
            head: LinearLayer::new(cfg.encoding + 2 * cfg.entity_dim, schema.class_count, rng),
        }
    }

    pub fn input(&self, real: &View, entities: EntityPair) -> Result<UnimodalInput, ModelError> {
        if real.modality != Modality::U {
            return Err(ModelError::WrongModality { expected: Modality::U, found: real.modality });
        }
        Ok(UnimodalInput { real: real.data.features(&self.u_spec), entities })
    }

    fn features(&self, x: &UnimodalInput) -> Result<(super::MlpCache, Vec<f64>), ModelError> {
        if x.real.len() != self.real_encoder.input_dim() {
            return Err(ModelError::DimensionMismatch("unimodal input features".into()));
        }
        let n = self.entity_emb.rows as u32;
        if x.entities.subject >= n || x.entities.object >= n {
            return Err(ModelError::DimensionMismatch("entity id outside embedding table".into()));
        }
        let (cache, r) = self.real_encoder.forward_cached(&x.real);
        let z = r
            .into_iter()
            .chain(self.entity_emb.row(x.entities.subject as usize).iter().copied())
            .chain(self.entity_emb.row(x.entities.object as usize).iter().copied())
            .collect();
        Ok((cache, z))
    }
}

impl Parameterized for UnimodalModel {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v = prefixed("real_encoder", self.real_encoder.tensors());
        v.push(("entity_emb".into(), &self.entity_emb));
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.real_encoder.tensors_mut();
        v.push(&mut self.entity_emb);
        v.extend(self.head.tensors_mut());
        v
    }
}

impl Classifier for UnimodalModel {
    type Input = UnimodalInput;

    fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    fn logits(&self, x: &UnimodalInput) -> Result<Vec<f64>, ModelError> {
        Ok(self.head.forward(&self.features(x)?.1))
    }

    fn loss_grad(&self, x: &UnimodalInput, label: Label, grad: &mut Self) -> Result<f64, ModelError> {
        let (cache, z) = self.features(x)?;
        let (loss, dlogits) = softmax_xent(&self.head.forward(&z), label)?;
        let dz = self.head.backward(&z, &dlogits, &mut grad.head);
        let d = self.real_encoder.output_dim();
        let e = self.entity_emb.cols;
        self.real_encoder.backward(&x.real, &cache, &dz[..d], &mut grad.real_encoder);
        grad.entity_emb.row_mut(x.entities.subject as usize).iter_mut().zip(&dz[d..d + e]).for_each(|(g, v)| *g += v);
        grad.entity_emb.row_mut(x.entities.object as usize).iter_mut().zip(&dz[d + e..]).for_each(|(g, v)| *g += v);
        Ok(loss)
    }
}

classifier_differentiable!(UnimodalModel, UnimodalInput);
