//! Exact mutual information on small discrete tables, the cross-entropy
//! lower bound, and data-processing checks along channel chains.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{ChannelError, DiscreteChannel};
use crate::datamodel::Label;
use crate::linalg::{self, Matrix};
use crate::models::{self, Classifier, ModelError, Parameterized, TrainConfig};
use crate::rng::{self, Stream};

pub const DEFAULT_CELL_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("table needs {cells} cells, cap is {cap}")]
    CapExceeded { cells: usize, cap: usize },
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("variable index {0} out of range or repeated")]
    BadIndex(usize),
    #[error("no samples")]
    EmptySamples,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InfoError>;

/// Dense joint pmf over a product of finite alphabets, last variable fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    sizes: Vec<usize>,
    table: Vec<f64>,
}

fn cells(sizes: &[usize]) -> Option<usize> {
    sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s))
}

impl DiscreteJoint {
    pub fn new(sizes: Vec<usize>, table: Vec<f64>, cap: usize) -> Result<Self> {
        let n = cells(&sizes).unwrap_or(usize::MAX);
        if n > cap {
            return Err(InfoError::CapExceeded { cells: n, cap });
        }
        if sizes.is_empty() || sizes.contains(&0) || table.len() != n {
            return Err(InfoError::Invalid("shape does not match table".into()));
        }
        if table.iter().any(|p| !(*p >= 0.0)) {
            return Err(InfoError::Invalid("negative or NaN mass".into()));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(InfoError::Invalid(format!("mass sums to {total}")));
        }
        Ok(Self { sizes, table })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Two-variable marginal `p(x_i, x_j)` as an `|X_i| × |X_j|` matrix.
    pub fn pair_marginal(&self, i: usize, j: usize) -> Result<Matrix> {
        let k = self.sizes.len();
        if i >= k || j >= k || i == j {
            return Err(InfoError::BadIndex(if i >= k { i } else { j }));
        }
        let mut strides = vec![1usize; k];
        for v in (0..k - 1).rev() {
            strides[v] = strides[v + 1] * self.sizes[v + 1];
        }
        let mut out = Matrix::zeros(self.sizes[i], self.sizes[j]);
        for (cell, p) in self.table.iter().enumerate() {
            let a = (cell / strides[i]) % self.sizes[i];
            let b = (cell / strides[j]) % self.sizes[j];
            out.data[a * self.sizes[j] + b] += p;
        }
        Ok(out)
    }
}

/// `Σ p(a,b) ln[p(a,b) / p(a)p(b)]` for a joint given as a matrix.
pub fn mi_of_pair(joint: &Matrix) -> f64 {
    let row: Vec<f64> = (0..joint.rows).map(|a| joint.row(a).iter().sum()).collect();
    let mut col = vec![0.0; joint.cols];
    for a in 0..joint.rows {
        for (b, c) in col.iter_mut().enumerate() {
            *c += joint[(a, b)];
        }
    }
    let mut mi = 0.0;
    for a in 0..joint.rows {
        for b in 0..joint.cols {
            let p = joint[(a, b)];
            if p > 0.0 {
                mi += p * (p / (row[a] * col[b])).ln();
            }
        }
    }
    mi
}

pub fn exact_mi(joint: &DiscreteJoint, i: usize, j: usize) -> Result<f64> {
    Ok(mi_of_pair(&joint.pair_marginal(i, j)?))
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// `Y → Z₁ → … → Z_k`, each arrow a row-stochastic matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    pub initial: Vec<f64>,
    pub channels: Vec<DiscreteChannel>,
}

impl MarkovChainSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.initial.iter().sum();
        if self.initial.is_empty() || self.initial.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(InfoError::Invalid("initial distribution".into()));
        }
        let mut width = self.initial.len();
        for (k, ch) in self.channels.iter().enumerate() {
            ch.validate()?;
            if ch.inputs() != width {
                return Err(InfoError::Invalid(format!("stage {k} expects {} symbols, gets {width}", ch.inputs())));
            }
            width = ch.outputs();
        }
        Ok(())
    }

    /// Alphabet sizes of Y and every later variable.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.initial.len()).chain(self.channels.iter().map(|c| c.outputs())).collect()
    }

    /// Full joint over every chain variable; only for short chains.
    pub fn joint(&self, cap: usize) -> Result<DiscreteJoint> {
        self.validate()?;
        let sizes = self.sizes();
        let n = cells(&sizes).unwrap_or(usize::MAX);
        if n > cap {
            return Err(InfoError::CapExceeded { cells: n, cap });
        }
        let mut table = self.initial.clone();
        for ch in &self.channels {
            let m = &ch.matrix;
            let mut next = Vec::with_capacity(table.len() * m.cols);
            for (cell, p) in table.iter().enumerate() {
                let last = cell % m.rows;
                next.extend(m.row(last).iter().map(|q| p * q));
            }
            table = next;
        }
        DiscreteJoint::new(sizes, table, cap)
    }

    /// `p(x_i, x_j)` for `i < j` by matrix propagation.
    pub fn pair_joint(&self, i: usize, j: usize, cap: usize) -> Result<Matrix> {
        let sizes = self.sizes();
        if i >= j || j >= sizes.len() {
            return Err(InfoError::BadIndex(j));
        }
        let n = sizes[i] * sizes[j];
        if n > cap {
            return Err(InfoError::CapExceeded { cells: n, cap });
        }
        let mut marginal = self.initial.clone();
        for ch in &self.channels[..i] {
            marginal = ch.matrix.matvec_t(&marginal);
        }
        let mut joint = Matrix::zeros(sizes[i], sizes[i]);
        for (a, p) in marginal.iter().enumerate() {
            joint[(a, a)] = *p;
        }
        for ch in &self.channels[i..j] {
            joint = joint.matmul(&ch.matrix);
        }
        Ok(joint)
    }
}

/// `I(Y; Z)` for every chain variable `Z`, starting with `I(Y; Y) = H(Y)`.
pub fn chain_mi_profile(spec: &MarkovChainSpec) -> Result<Vec<f64>> {
    chain_mi_profile_capped(spec, DEFAULT_CELL_CAP)
}

pub fn chain_mi_profile_capped(spec: &MarkovChainSpec, cap: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let sizes = spec.sizes();
    (0..sizes.len())
        .map(|k| if k == 0 { Ok(entropy(&spec.initial)) } else { spec.pair_joint(0, k, cap).map(|m| mi_of_pair(&m)) })
        .collect()
}

/// Positions where the profile rises by more than `tol`.
pub fn profile_increases(profile: &[f64], tol: f64) -> Vec<usize> {
    profile.windows(2).enumerate().filter(|(_, w)| w[1] > w[0] + tol).map(|(k, _)| k + 1).collect()
}

/// Pairs `(i, j)` with `I(Y; Z_last) > I(Z_i; Z_j) + tol`.
pub fn pairwise_dpi_violations(spec: &MarkovChainSpec, tol: f64) -> Result<Vec<(usize, usize)>> {
    let k = spec.sizes().len();
    let end = mi_of_pair(&spec.pair_joint(0, k - 1, DEFAULT_CELL_CAP)?);
    let mut bad = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if end > mi_of_pair(&spec.pair_joint(i, j, DEFAULT_CELL_CAP)?) + tol {
                bad.push((i, j));
            }
        }
    }
    Ok(bad)
}

/// A row-stochastic matrix with flat-Dirichlet rows; `sharpness > 1`
/// pushes rows towards one-hot.
pub fn random_channel(inputs: usize, outputs: usize, sharpness: f64, rng: &mut Stream) -> DiscreteChannel {
    let mut m = Matrix::zeros(inputs, outputs);
    for a in 0..inputs {
        let row: Vec<f64> = (0..outputs).map(|_| Exp1.sample(rng)).map(|e: f64| e.powf(sharpness)).collect();
        let total: f64 = row.iter().sum();
        m.row_mut(a).iter_mut().zip(row).for_each(|(d, x)| *d = x / total);
    }
    DiscreteChannel::new(m).expect("normalized rows")
}

/// Random chain with `1..=max_stages` channels over alphabets `2..=max_alphabet`.
pub fn random_chain(max_alphabet: usize, max_stages: usize, rng: &mut Stream) -> MarkovChainSpec {
    let stages = rng.random_range(1..=max_stages);
    let y = rng.random_range(2..=max_alphabet);
    let raw: Vec<f64> = (0..y).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    let initial = raw.iter().map(|x| x / total).collect();
    let mut width = y;
    let mut channels = Vec::with_capacity(stages);
    for _ in 0..stages {
        let out = rng.random_range(2..=max_alphabet);
        let sharp = rng.random_range(1.0..4.0);
        channels.push(random_channel(width, out, sharp, rng));
        width = out;
    }
    MarkovChainSpec { initial, channels }
}

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub bound: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Mean of `f(v,y) − logsumexp_{y'} f(v,y')` over `samples`.
pub fn mi_lower_bound<S>(
    f: impl Fn(&S, usize) -> f64,
    samples: &[(S, Label)],
    classes: usize,
) -> Result<BoundEstimate> {
    if samples.is_empty() {
        return Err(InfoError::EmptySamples);
    }
    let terms: Vec<f64> = samples
        .iter()
        .map(|(v, y)| {
            let scores: Vec<f64> = (0..classes).map(|c| f(v, c)).collect();
            scores[y.index()] - linalg::logsumexp(&scores)
        })
        .collect();
    Ok(mean_and_se(&terms))
}

pub fn mean_and_se(xs: &[f64]) -> BoundEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    BoundEstimate { bound: mean, std_error: (var / n).sqrt(), samples: xs.len() }
}

/// Lookup-table classifier over a finite alphabet: `logits = W[v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TableClassifier {
    pub weights: Matrix,
}

impl Parameterized for TableClassifier {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("weights".to_string(), &self.weights)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weights]
    }
}

impl Classifier for TableClassifier {
    type Input = usize;

    fn class_count(&self) -> usize {
        self.weights.cols
    }

    fn logits(&self, v: &usize) -> std::result::Result<Vec<f64>, ModelError> {
        if *v >= self.weights.rows {
            return Err(ModelError::DimensionMismatch(format!("symbol {v}")));
        }
        Ok(self.weights.row(*v).to_vec())
    }

    fn loss_grad(&self, v: &usize, label: Label, grad: &mut Self) -> std::result::Result<f64, ModelError> {
        let (loss, d) = models::softmax_xent(&self.logits(v)?, label)?;
        grad.weights.row_mut(*v).iter_mut().zip(d).for_each(|(g, x)| *g += x);
        Ok(loss)
    }
}

/// Uniform label over `C` classes observed through a `C × A` channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    pub channel: DiscreteChannel,
}

impl DiscreteWorld {
    pub fn classes(&self) -> usize {
        self.channel.inputs()
    }

    pub fn exact_mi(&self) -> f64 {
        let c = self.classes();
        let mut joint = self.channel.matrix.clone();
        joint.scale(1.0 / c as f64);
        mi_of_pair(&joint)
    }

    /// Labels cycle through the classes so every class is equally frequent.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Vec<(usize, Label)> {
        let c = self.classes();
        (0..n)
            .map(|i| {
                let y = i % c;
                let u: f64 = rng.random();
                let row = self.channel.matrix.row(y);
                let mut acc = 0.0;
                let v = row.iter().position(|p| {
                    acc += p;
                    u < acc
                });
                (v.unwrap_or(row.len() - 1), Label(y as u32))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBudget {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for BoundBudget {
    fn default() -> Self {
        Self { train_samples: 4000, eval_samples: 4000, steps: 400, learning_rate: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Held-out mean of `f(v,y) − logsumexp f`, never above zero.
    pub bound: f64,
    /// `bound + ln C`, the sharper form before the last relaxation.
    pub tight_bound: f64,
    pub exact: f64,
    pub std_error: f64,
    /// `exact − tight_bound`.
    pub margin: f64,
    /// Either bound exceeds `exact + 3·SE`.
    pub violated: bool,
}

/// Trains a table classifier on samples from `world` and compares the
/// held-out bound to the exact mutual information.
pub fn verify_ce_bound(world: &DiscreteWorld, budget: &BoundBudget, seed: u64) -> Result<BoundReport> {
    world.channel.validate()?;
    let c = world.classes();
    let mut rng = rng::stream(seed, "bound", &[]);
    let train_set = world.sample(budget.train_samples, &mut rng);
    let eval_set = world.sample(budget.eval_samples, &mut rng);
    let model = TableClassifier { weights: Matrix::zeros(world.channel.outputs(), c) };
    let cfg = TrainConfig {
        learning_rate: budget.learning_rate,
        steps: budget.steps,
        batch_size: 256,
        weight_decay: 0.0,
        seed: rng::derive_seed(seed, "bound-train", &[]),
        ..Default::default()
    };
    let (trained, _) = models::train(model, &train_set, &cfg)?;
    let est = mi_lower_bound(|v: &usize, y| trained.weights[(*v, y)], &eval_set, c)?;
    let exact = world.exact_mi();
    let tight = est.bound + (c as f64).ln();
    let limit = exact + 3.0 * est.std_error;
    Ok(BoundReport {
        bound: est.bound,
        tight_bound: tight,
        exact,
        std_error: est.std_error,
        margin: exact - tight,
        violated: est.bound > limit || tight > limit,
    })
}

/// World with `2..=max_alphabet` classes and outputs and a random channel.
pub fn random_world(max_alphabet: usize, rng: &mut Stream) -> DiscreteWorld {
    let c = rng.random_range(2..=max_alphabet);
    let a = rng.random_range(2..=max_alphabet);
    let sharp = rng.random_range(1.0..5.0);
    DiscreteWorld { channel: random_channel(c, a, sharp, rng) }
}
