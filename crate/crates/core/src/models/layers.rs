use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Differentiable, Parameterized, RegressionSample};
use crate::linalg::Matrix;
use crate::rng::Stream;

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut Stream) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    /// `out × 1`.
    pub bias: Matrix,
}

impl LinearLayer {
    pub fn new(input: usize, output: usize, rng: &mut Stream) -> Self {
        Self { weight: xavier(output, input, rng), bias: Matrix::zeros(output, 1) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: Matrix::zeros(output, 1) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        y.iter_mut().zip(&self.bias.data).for_each(|(a, b)| *a += b);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearLayer) -> Vec<f64> {
        grad.weight.add_outer(dy, x, 1.0);
        grad.bias.data.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        self.weight.matvec_t(dy)
    }
}

impl Parameterized for LinearLayer {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Differentiable for LinearLayer {
    type Sample = RegressionSample;

    fn objective_and_grad(&self, s: &RegressionSample) -> (f64, Self) {
        let y = self.forward(&s.input);
        let (loss, dy) = half_sq_error(&y, &s.target);
        let mut g = self.zeros_like();
        self.backward(&s.input, &dy, &mut g);
        (loss, g)
    }

    fn objective(&self, s: &RegressionSample) -> f64 {
        half_sq_error(&self.forward(&s.input), &s.target).0
    }
}

pub(crate) fn half_sq_error(y: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
    (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
}

/// One tanh hidden layer followed by a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    hidden: Vec<f64>,
}

impl MlpEncoder {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Stream) -> Self {
        assert!(hidden >= 1, "hidden width must be at least 1");
        Self { hidden: LinearLayer::new(input, hidden, rng), output: LinearLayer::new(hidden, output, rng) }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { hidden: LinearLayer::zeros(input, hidden), output: LinearLayer::zeros(hidden, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).1
    }

    pub fn forward_cached(&self, x: &[f64]) -> (MlpCache, Vec<f64>) {
        let hidden: Vec<f64> = self.hidden.forward(x).into_iter().map(f64::tanh).collect();
        let y = self.output.forward(&hidden);
        (MlpCache { hidden }, y)
    }

    pub fn backward(&self, x: &[f64], cache: &MlpCache, dy: &[f64], grad: &mut MlpEncoder) -> Vec<f64> {
        let dh = self.output.backward(&cache.hidden, dy, &mut grad.output);
        let dpre: Vec<f64> = dh.iter().zip(&cache.hidden).map(|(d, h)| d * (1.0 - h * h)).collect();
        self.hidden.backward(x, &dpre, &mut grad.hidden)
    }
}

impl Parameterized for MlpEncoder {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("hidden", self.hidden.tensors()).into_iter().chain(prefixed("output", self.output.tensors())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}

impl Differentiable for MlpEncoder {
    type Sample = RegressionSample;

    fn objective_and_grad(&self, s: &RegressionSample) -> (f64, Self) {
        let (cache, y) = self.forward_cached(&s.input);
        let (loss, dy) = half_sq_error(&y, &s.target);
        let mut g = self.zeros_like();
        self.backward(&s.input, &cache, &dy, &mut g);
        (loss, g)
    }

    fn objective(&self, s: &RegressionSample) -> f64 {
        half_sq_error(&self.forward(&s.input), &s.target).0
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, tensors: Vec<(String, &'a Matrix)>) -> Vec<(String, &'a Matrix)> {
    tensors.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Embedding lookup table, one row per id.
pub(crate) fn embedding(rows: usize, dim: usize, rng: &mut Stream) -> Matrix {
    Matrix::from_vec(rows, dim, (0..rows * dim).map(|_| rng.random_range(-0.5..0.5)).collect())
}
