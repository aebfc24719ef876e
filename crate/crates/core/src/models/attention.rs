//! Single-query cross-attention over an unordered set of memory rows.

use serde::{Deserialize, Serialize};

use super::layers::{half_sq_error, prefixed, xavier, MlpCache, MlpEncoder};
use super::{Differentiable, ModelError, Parameterized};
use crate::linalg::{self, Matrix};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionBlock {
    /// `d_k × d_q`
    pub w_q: Matrix,
    /// `d_k × d_m`
    pub w_k: Matrix,
    /// `d_o × d_m`
    pub w_v: Matrix,
    /// `d_o → h → d_o`, applied after the residual.
    pub feedforward: MlpEncoder,
}

/// Everything the backward pass needs from [`CrossAttentionBlock::attend`].
#[derive(Clone, Debug)]
pub struct AttendCache {
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    attend: AttendCache,
    residual: Vec<f64>,
    ff: MlpCache,
}

impl CrossAttentionBlock {
    /// Block whose query and output width is `d_model` (the residual requires `d_o = d_q`).
    pub fn new(d_model: usize, d_key: usize, d_memory: usize, ff_hidden: usize, rng: &mut Stream) -> Self {
        Self {
            w_q: xavier(d_key, d_model, rng),
            w_k: xavier(d_key, d_memory, rng),
            w_v: xavier(d_model, d_memory, rng),
            feedforward: MlpEncoder::new(d_model, ff_hidden, d_model, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.w_q.rows
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.cols
    }

    fn scale(&self) -> f64 {
        (self.key_dim() as f64).sqrt()
    }

    /// `softmax(M_K W_K W_Q q / √d) · (W_V M_V)`, with `d` the width of `W_Q q`.
    pub fn attend(
        &self,
        q: &[f64],
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
    ) -> Result<(AttendCache, Vec<f64>), ModelError> {
        if keys.is_empty() {
            return Err(ModelError::EmptyAttentionSet);
        }
        if keys.len() != values.len() {
            return Err(ModelError::DimensionMismatch("key and value sets differ in size".into()));
        }
        let query = self.w_q.matvec(q);
        let keys: Vec<Vec<f64>> = keys.iter().map(|m| self.w_k.matvec(m)).collect();
        let values: Vec<Vec<f64>> = values.iter().map(|m| self.w_v.matvec(m)).collect();
        let scale = self.scale();
        let scores: Vec<f64> = keys.iter().map(|k| linalg::dot(k, &query) / scale).collect();
        let weights = linalg::softmax(&scores);
        let mut out = vec![0.0; self.w_v.rows];
        for (w, v) in weights.iter().zip(&values) {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
        }
        Ok((AttendCache { query, keys, values, weights }, out))
    }

    /// Returns `(∂q, ∂M_K rows, ∂M_V rows)` and accumulates parameter gradients.
    pub fn attend_backward(
        &self,
        q: &[f64],
        key_rows: &[Vec<f64>],
        value_rows: &[Vec<f64>],
        cache: &AttendCache,
        dout: &[f64],
        grad: &mut CrossAttentionBlock,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let scale = self.scale();
        let da: Vec<f64> = cache.values.iter().map(|v| linalg::dot(dout, v)).collect();
        let mean_da: f64 = cache.weights.iter().zip(&da).map(|(a, d)| a * d).sum();
        let mut dquery = vec![0.0; cache.query.len()];
        let mut dkey_rows = Vec::with_capacity(key_rows.len());
        let mut dvalue_rows = Vec::with_capacity(value_rows.len());
        for i in 0..key_rows.len() {
            let a = cache.weights[i];
            let ds = a * (da[i] - mean_da) / scale;
            dquery.iter_mut().zip(&cache.keys[i]).for_each(|(g, k)| *g += ds * k);
            let dkey: Vec<f64> = cache.query.iter().map(|x| ds * x).collect();
            grad.w_k.add_outer(&dkey, &key_rows[i], 1.0);
            dkey_rows.push(self.w_k.matvec_t(&dkey));
            let dval: Vec<f64> = dout.iter().map(|d| a * d).collect();
            grad.w_v.add_outer(&dval, &value_rows[i], 1.0);
            dvalue_rows.push(self.w_v.matvec_t(&dval));
        }
        grad.w_q.add_outer(&dquery, q, 1.0);
        (self.w_q.matvec_t(&dquery), dkey_rows, dvalue_rows)
    }

    /// `h = q + attend(q, M, M)`, `out = h + feedforward(h)`.
    pub fn forward_cached(&self, q: &[f64], memory: &[Vec<f64>]) -> Result<(BlockCache, Vec<f64>), ModelError> {
        if q.len() != self.model_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "query has width {}, block expects {}",
                q.len(),
                self.model_dim()
            )));
        }
        let (attend, a) = self.attend(q, memory, memory)?;
        let residual: Vec<f64> = q.iter().zip(&a).map(|(x, y)| x + y).collect();
        let (ff, f) = self.feedforward.forward_cached(&residual);
        let out = residual.iter().zip(&f).map(|(x, y)| x + y).collect();
        Ok((BlockCache { attend, residual, ff }, out))
    }

    pub fn forward(&self, q: &[f64], memory: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_cached(q, memory)?.1)
    }

    /// Returns `(∂q, ∂memory rows)`.
    pub fn backward(
        &self,
        q: &[f64],
        memory: &[Vec<f64>],
        cache: &BlockCache,
        dout: &[f64],
        grad: &mut CrossAttentionBlock,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let dff_in = self.feedforward.backward(&cache.residual, &cache.ff, dout, &mut grad.feedforward);
        let dres: Vec<f64> = dout.iter().zip(&dff_in).map(|(a, b)| a + b).collect();
        let (mut dq, dk, dv) = self.attend_backward(q, memory, memory, &cache.attend, &dres, grad);
        dq.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        let dmem = dk.into_iter().zip(dv).map(|(a, b)| a.iter().zip(&b).map(|(x, y)| x + y).collect()).collect();
        (dq, dmem)
    }
}

/// Plain attention read-out (no residual, no feedforward).
pub fn cross_attention(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    block: &CrossAttentionBlock,
) -> Result<Vec<f64>, ModelError> {
    Ok(block.attend(q, keys, values)?.1)
}

impl Parameterized for CrossAttentionBlock {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v: Vec<(String, &Matrix)> =
            vec![("w_q".into(), &self.w_q), ("w_k".into(), &self.w_k), ("w_v".into(), &self.w_v)];
        v.extend(prefixed("feedforward", self.feedforward.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v];
        v.extend(self.feedforward.tensors_mut());
        v
    }
}

/// Regression target for checking the block in isolation.
#[derive(Clone, Debug)]
pub struct AttentionSample {
    pub query: Vec<f64>,
    pub memory: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl Differentiable for CrossAttentionBlock {
    type Sample = AttentionSample;

    fn objective_and_grad(&self, s: &AttentionSample) -> (f64, Self) {
        let (cache, y) = self.forward_cached(&s.query, &s.memory).expect("valid attention sample");
        let (loss, dy) = half_sq_error(&y, &s.target);
        let mut g = self.zeros_like();
        self.backward(&s.query, &s.memory, &cache, &dy, &mut g);
        (loss, g)
    }

    fn objective(&self, s: &AttentionSample) -> f64 {
        half_sq_error(&self.forward(&s.query, &s.memory).expect("valid attention sample"), &s.target).0
    }
}
