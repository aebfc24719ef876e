//! Stochastic cross-modal channels, their composition, and the seeded
//! benchmark worlds that stand in for a labeled real-data distribution.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DatasetSchema, EntityPair, Instance, Label, View, ViewData, ViewSpec};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("spec mismatch: channel expects {expected}, got {found}")]
    SpecMismatch { expected: String, found: String },
    #[error("empty composition")]
    EmptyComposition,
    #[error("invalid channel: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (known: {known})", known = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
}

type Result<T> = std::result::Result<T, ChannelError>;

mod rows {
    use crate::linalg::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..m.rows).map(|i| m.row(i)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_rows(&rows))
    }
}

/// Row-stochastic per-symbol channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    #[serde(with = "rows")]
    pub matrix: Matrix,
}

impl DiscreteChannel {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let c = Self { matrix };
        c.validate()?;
        Ok(c)
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: Matrix::identity(n) }
    }

    pub fn uniform(a_in: usize, a_out: usize) -> Self {
        Self { matrix: Matrix::from_vec(a_in, a_out, vec![1.0 / a_out as f64; a_in * a_out]) }
    }

    pub fn binary_symmetric(flip: f64) -> Self {
        Self { matrix: Matrix::from_rows(&[vec![1.0 - flip, flip], vec![flip, 1.0 - flip]]) }
    }

    pub fn inputs(&self) -> usize {
        self.matrix.rows
    }

    pub fn outputs(&self) -> usize {
        self.matrix.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.rows == 0 || self.matrix.cols == 0 {
            return Err(ChannelError::Invalid("discrete channel needs a non-empty matrix".into()));
        }
        for i in 0..self.matrix.rows {
            let row = self.matrix.row(i);
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(ChannelError::Invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(ChannelError::Invalid(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(())
    }

    fn sample_symbol(&self, sym: usize, rng: &mut Stream) -> u32 {
        let row = self.matrix.row(sym);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j as u32;
            }
        }
        // Rounding left `u` past the last cumulative sum; take the last reachable symbol.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1) as u32
    }
}

/// `out = W·x + b + σ·ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianChannel {
    #[serde(with = "rows")]
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl LinearGaussianChannel {
    pub fn new(weight: Matrix, bias: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        let c = Self { weight, bias, noise_sigma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(ChannelError::Invalid("noise_sigma must be positive".into()));
        }
        if self.bias.len() != self.weight.rows {
            return Err(ChannelError::Invalid("bias length must equal weight rows".into()));
        }
        if !self.weight.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(ChannelError::Invalid("non-finite linear-gaussian parameters".into()));
        }
        Ok(())
    }
}

/// Mode-collapse generator: snaps `W·x` onto a prototype drawn with
/// probability ∝ `exp(-‖W·x − p_j‖² / temperature)`, plus isotropic jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCollapseChannel {
    #[serde(with = "rows")]
    pub weight: Matrix,
    #[serde(with = "rows")]
    pub prototypes: Matrix,
    pub temperature: f64,
    pub jitter_sigma: f64,
}

impl PrototypeCollapseChannel {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.rows < 1 {
            return Err(ChannelError::Invalid("at least one prototype required".into()));
        }
        if self.prototypes.cols != self.weight.rows {
            return Err(ChannelError::Invalid("prototype dimension must equal weight rows".into()));
        }
        if !(self.temperature > 0.0) || !(self.jitter_sigma >= 0.0) {
            return Err(ChannelError::Invalid("temperature must be positive and jitter non-negative".into()));
        }
        Ok(())
    }

    /// Prototype-selection probabilities for input `x`.
    pub fn assignment_probs(&self, x: &[f64]) -> Vec<f64> {
        let z = self.weight.matvec(x);
        let logits: Vec<f64> = (0..self.prototypes.rows)
            .map(|j| -linalg::sq_dist(&z, self.prototypes.row(j)) / self.temperature)
            .collect();
        linalg::softmax(&logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub channel: Channel,
}

/// Picks one component channel per sample with the given probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureChannel {
    pub components: Vec<MixtureComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedChannel {
    pub stages: Vec<Channel>,
}

impl ComposedChannel {
    /// End-to-end transition matrix when every stage is discrete.
    pub fn discrete_matrix(&self) -> Option<Matrix> {
        let mut acc: Option<Matrix> = None;
        for s in &self.stages {
            let m = match s {
                Channel::Discrete(d) => d.matrix.clone(),
                Channel::Compose(c) => c.discrete_matrix()?,
                _ => return None,
            };
            acc = Some(match acc {
                None => m,
                Some(a) => a.matmul(&m),
            });
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Channel {
    Discrete(DiscreteChannel),
    LinearGaussian(LinearGaussianChannel),
    PrototypeCollapse(PrototypeCollapseChannel),
    Mixture(MixtureChannel),
    Compose(ComposedChannel),
}

impl Channel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Channel::Discrete(c) => c.validate(),
            Channel::LinearGaussian(c) => c.validate(),
            Channel::PrototypeCollapse(c) => c.validate(),
            Channel::Mixture(m) => {
                if m.components.is_empty() {
                    return Err(ChannelError::Invalid("mixture needs at least one component".into()));
                }
                let total: f64 = m.components.iter().map(|c| c.weight).sum();
                if m.components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(ChannelError::Invalid("mixture weights must be non-negative and sum to 1".into()));
                }
                let (i0, o0) = m.components[0].channel.io_specs()?;
                for c in &m.components {
                    c.channel.validate()?;
                    if c.channel.io_specs()? != (i0, o0) {
                        return Err(ChannelError::Invalid("mixture components must share input/output specs".into()));
                    }
                }
                Ok(())
            }
            Channel::Compose(c) => {
                if c.stages.is_empty() {
                    return Err(ChannelError::EmptyComposition);
                }
                for s in &c.stages {
                    s.validate()?;
                }
                for w in c.stages.windows(2) {
                    let (_, out) = w[0].io_specs()?;
                    let (inp, _) = w[1].io_specs()?;
                    if !specs_compatible(&out, &inp) {
                        return Err(ChannelError::SpecMismatch { expected: inp.to_string(), found: out.to_string() });
                    }
                }
                Ok(())
            }
        }
    }

    /// Input and output view specs.
    pub fn io_specs(&self) -> Result<(ViewSpec, ViewSpec)> {
        Ok(match self {
            Channel::Discrete(c) => {
                (ViewSpec::Discrete { alphabet: c.inputs() }, ViewSpec::Discrete { alphabet: c.outputs() })
            }
            Channel::LinearGaussian(c) => {
                (ViewSpec::Vector { dim: c.weight.cols }, ViewSpec::Vector { dim: c.weight.rows })
            }
            Channel::PrototypeCollapse(c) => {
                (ViewSpec::Vector { dim: c.weight.cols }, ViewSpec::Vector { dim: c.prototypes.cols })
            }
            Channel::Mixture(m) => {
                m.components.first().ok_or(ChannelError::Invalid("empty mixture".into()))?.channel.io_specs()?
            }
            Channel::Compose(c) => {
                let first = c.stages.first().ok_or(ChannelError::EmptyComposition)?;
                let last = c.stages.last().ok_or(ChannelError::EmptyComposition)?;
                (first.io_specs()?.0, last.io_specs()?.1)
            }
        })
    }

    pub fn sample(&self, input: &ViewData, rng: &mut Stream) -> Result<ViewData> {
        let (in_spec, _) = self.io_specs()?;
        if !input.matches(&in_spec) {
            return Err(ChannelError::SpecMismatch { expected: in_spec.to_string(), found: describe(input) });
        }
        self.sample_unchecked(input, rng)
    }

    fn sample_unchecked(&self, input: &ViewData, rng: &mut Stream) -> Result<ViewData> {
        Ok(match (self, input) {
            (Channel::Discrete(c), ViewData::Discrete(s)) => {
                ViewData::Discrete(s.iter().map(|&x| c.sample_symbol(x as usize, rng)).collect())
            }
            (Channel::LinearGaussian(c), ViewData::Vector(x)) => {
                let mut y = c.weight.matvec(x);
                for (yi, b) in y.iter_mut().zip(&c.bias) {
                    let z: f64 = StandardNormal.sample(rng);
                    *yi += b + c.noise_sigma * z;
                }
                ViewData::Vector(y)
            }
            (Channel::PrototypeCollapse(c), ViewData::Vector(x)) => {
                let probs = c.assignment_probs(x);
                let j = sample_index(&probs, rng);
                let y = c
                    .prototypes
                    .row(j)
                    .iter()
                    .map(|&p| {
                        let z: f64 = StandardNormal.sample(rng);
                        p + c.jitter_sigma * z
                    })
                    .collect();
                ViewData::Vector(y)
            }
            (Channel::Mixture(m), _) => {
                let probs: Vec<f64> = m.components.iter().map(|c| c.weight).collect();
                let j = sample_index(&probs, rng);
                m.components[j].channel.sample_unchecked(input, rng)?
            }
            (Channel::Compose(c), _) => {
                let mut cur = input.clone();
                for s in &c.stages {
                    cur = s.sample_unchecked(&cur, rng)?;
                }
                cur
            }
            _ => {
                return Err(ChannelError::SpecMismatch {
                    expected: self.io_specs()?.0.to_string(),
                    found: describe(input),
                })
            }
        })
    }

    /// Which mixture component (if any) a sample would use; exposed for
    /// diagnostics that need to attribute collapse.
    pub fn as_mixture(&self) -> Option<&MixtureChannel> {
        match self {
            Channel::Mixture(m) => Some(m),
            _ => None,
        }
    }
}

/// Apply `channel` to a view. The output carries the opposite modality.
pub fn sample_channel(channel: &Channel, input: &View, rng: &mut Stream) -> Result<View> {
    let data = channel.sample(&input.data, rng)?;
    let modality = match input.modality {
        crate::datamodel::Modality::U => crate::datamodel::Modality::V,
        crate::datamodel::Modality::V => crate::datamodel::Modality::U,
    };
    Ok(View { modality, data })
}

pub fn compose(channels: Vec<Channel>) -> Result<ComposedChannel> {
    if channels.is_empty() {
        return Err(ChannelError::EmptyComposition);
    }
    let c = ComposedChannel { stages: channels };
    Channel::Compose(c.clone()).validate()?;
    Ok(c)
}

fn specs_compatible(out: &ViewSpec, inp: &ViewSpec) -> bool {
    out == inp
}

fn describe(v: &ViewData) -> String {
    match v {
        ViewData::Discrete(s) => format!("discrete sequence of length {}", s.len()),
        ViewData::Vector(x) => format!("vector({})", x.len()),
    }
}

fn sample_index(probs: &[f64], rng: &mut Stream) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Class-conditional real-data model `P(view | Y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassConditional {
    Gaussian {
        #[serde(with = "rows")]
        class_means: Matrix,
        within_class_sigma: f64,
    },
    Symbols {
        /// `C × A` per-position symbol distribution for each class.
        #[serde(with = "rows")]
        class_probs: Matrix,
        length: usize,
    },
}

impl ClassConditional {
    pub fn spec(&self) -> ViewSpec {
        match self {
            ClassConditional::Gaussian { class_means, .. } => ViewSpec::Vector { dim: class_means.cols },
            ClassConditional::Symbols { class_probs, .. } => ViewSpec::Discrete { alphabet: class_probs.cols },
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassConditional::Gaussian { class_means, .. } => class_means.rows,
            ClassConditional::Symbols { class_probs, .. } => class_probs.rows,
        }
    }

    pub fn sample(&self, label: Label, rng: &mut Stream) -> ViewData {
        match self {
            ClassConditional::Gaussian { class_means, within_class_sigma } => ViewData::Vector(
                class_means
                    .row(label.index())
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + within_class_sigma * z
                    })
                    .collect(),
            ),
            ClassConditional::Symbols { class_probs, length } => {
                let row = class_probs.row(label.index()).to_vec();
                ViewData::Discrete((0..*length).map(|_| sample_index(&row, rng) as u32).collect())
            }
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.classes() != classes {
            return Err(ChannelError::Invalid("class-conditional model has the wrong number of classes".into()));
        }
        match self {
            ClassConditional::Gaussian { class_means, within_class_sigma } => {
                if !(*within_class_sigma > 0.0) {
                    return Err(ChannelError::Invalid("within_class_sigma must be positive".into()));
                }
                for a in 0..class_means.rows {
                    for b in a + 1..class_means.rows {
                        if class_means.row(a) == class_means.row(b) {
                            return Err(ChannelError::Invalid(format!("classes {a} and {b} share a mean")));
                        }
                    }
                }
                Ok(())
            }
            ClassConditional::Symbols { class_probs, .. } => {
                DiscreteChannel { matrix: class_probs.clone() }.validate()?;
                for a in 0..class_probs.rows {
                    for b in a + 1..class_probs.rows {
                        if class_probs.row(a) == class_probs.row(b) {
                            return Err(ChannelError::Invalid(format!("classes {a} and {b} share a distribution")));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Seeded labeled world: `P(U | Y)`, entity assignment, and optionally a real
/// V-side view `P(V | Y)` (conditionally independent of U) for multimodal tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkWorld {
    pub class_count: usize,
    pub entity_vocab: usize,
    pub u_model: ClassConditional,
    pub v_spec: ViewSpec,
    pub paired: Option<ClassConditional>,
    /// Allowed entity pairs per class.
    pub entity_map: Vec<Vec<EntityPair>>,
    pub none_class: Option<Label>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    /// Instance-id offset so train and test ids never collide.
    pub fn id_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

impl BenchmarkWorld {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(ChannelError::Invalid("class_count must be at least 2".into()));
        }
        self.u_model.validate(self.class_count)?;
        if let Some(p) = &self.paired {
            p.validate(self.class_count)?;
            if p.spec() != self.v_spec {
                return Err(ChannelError::Invalid("paired view model does not match v_spec".into()));
            }
        }
        if self.entity_map.len() != self.class_count || self.entity_map.iter().any(Vec::is_empty) {
            return Err(ChannelError::Invalid("every class needs at least one entity pair".into()));
        }
        let vocab = self.entity_vocab as u32;
        if self.entity_map.iter().flatten().any(|p| p.subject >= vocab || p.object >= vocab) {
            return Err(ChannelError::Invalid("entity id outside vocabulary".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            class_count: self.class_count,
            entity_vocab: self.entity_vocab,
            u_spec: self.u_model.spec(),
            v_spec: self.v_spec,
            none_class: self.none_class,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sample_instance(&self, split: Split, id: u64, label: Label) -> Instance {
        let mut rng = rng::stream(self.seed, "benchmark", &[split.tag(), id]);
        let pairs = &self.entity_map[label.index()];
        let entities = pairs[rng.random_range(0..pairs.len())];
        let real = self.u_model.sample(label, &mut rng);
        let paired = match (split, &self.paired) {
            (Split::Test, Some(p)) => Some(View::v(p.sample(label, &mut rng))),
            _ => None,
        };
        Instance { id, label, entities, real_view: View::u(real), paired_view: paired, synthetic_pool: Vec::new() }
    }

    /// Balanced split with classes interleaved (`id = offset + i·C + c`).
    pub fn generate_split(&self, n_per_class: usize, split: Split) -> Vec<Instance> {
        let c = self.class_count as u64;
        (0..n_per_class as u64)
            .flat_map(|i| (0..c).map(move |k| (i, k)))
            .map(|(i, k)| self.sample_instance(split, split.id_offset() + i * c + k, Label(k as u32)))
            .collect()
    }
}

/// Balanced training dataset drawn from the world's real-data model.
pub fn generate_benchmark(world: &BenchmarkWorld, n_per_class: usize) -> (Vec<Instance>, DatasetSchema) {
    (world.generate_split(n_per_class, Split::Train), world.schema())
}

/// A world together with its generator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub world: BenchmarkWorld,
    pub u_to_v: Channel,
    pub v_to_u: Channel,
}

pub const PRESET_NAMES: &[&str] = &["clean", "noisy", "collapse-heavy", "discrete"];

/// Knobs for the continuous presets.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPresetParams {
    pub classes: usize,
    pub u_dim: usize,
    pub v_dim: usize,
    /// Distance between adjacent class means, in units of `sigma_u`.
    pub separation: f64,
    pub sigma_u: f64,
    pub gen_noise: f64,
    pub back_noise: f64,
    pub paired_sigma: f64,
    pub collapse_prob: f64,
    pub prototypes: usize,
    pub temperature: f64,
    pub jitter: f64,
    pub entity_vocab: usize,
    pub pairs_per_class: usize,
}

impl GaussianPresetParams {
    pub fn clean() -> Self {
        Self {
            classes: 4,
            u_dim: 16,
            v_dim: 4,
            separation: 4.0,
            sigma_u: 1.0,
            gen_noise: 0.2,
            back_noise: 0.5,
            paired_sigma: 1.0,
            collapse_prob: 0.0,
            prototypes: 3,
            temperature: 1e3,
            jitter: 0.05,
            entity_vocab: 12,
            pairs_per_class: 3,
        }
    }

    pub fn noisy() -> Self {
        Self { gen_noise: 0.6, back_noise: 1.0, ..Self::clean() }
    }

    pub fn collapse_heavy() -> Self {
        Self { separation: 2.5, collapse_prob: 0.5, gen_noise: 0.3, back_noise: 0.5, ..Self::clean() }
    }
}

/// Fixed construction seed for preset geometry; sampling uses `world.seed`.
const GEOMETRY_SEED: u64 = 0x0005_EED0_F9E0;

fn orthonormal_rows(n: usize, rng: &mut Stream) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let p = linalg::dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let nv = linalg::norm(&v);
        if nv > 1e-6 {
            v.iter_mut().for_each(|a| *a /= nv);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

/// Class positions in the 2-D signal plane: corners of a square grid with unit spacing.
fn plane_coords(classes: usize) -> Vec<[f64; 2]> {
    let side = (classes as f64).sqrt().ceil() as usize;
    (0..classes).map(|k| [(k % side) as f64, (k / side) as f64]).collect()
}

/// Entity pairs per class; every pair is shared by two neighbouring classes.
fn shared_entity_map(classes: usize, vocab: usize, pairs_per_class: usize, rng: &mut Stream) -> Vec<Vec<EntityPair>> {
    let mut pool: Vec<EntityPair> = Vec::new();
    for _ in 0..classes * pairs_per_class {
        let subject = rng.random_range(0..vocab as u32);
        let object = rng.random_range(0..vocab as u32);
        pool.push(EntityPair { subject, object });
    }
    (0..classes)
        .map(|c| {
            let own = &pool[c * pairs_per_class..(c + 1) * pairs_per_class];
            let next = (c + 1) % classes;
            let shared = &pool[next * pairs_per_class..next * pairs_per_class + pairs_per_class.div_ceil(2)];
            own.iter().chain(shared).copied().collect()
        })
        .collect()
}

pub fn gaussian_preset(p: &GaussianPresetParams) -> Result<Preset> {
    let mut g = rng::seeded(GEOMETRY_SEED);
    let basis = orthonormal_rows(p.u_dim, &mut g);
    let proj = Matrix::from_vec(p.v_dim, p.u_dim, basis.data[..p.v_dim * p.u_dim].to_vec());
    let coords = plane_coords(p.classes);
    let centre = {
        let n = coords.len() as f64;
        [coords.iter().map(|c| c[0]).sum::<f64>() / n, coords.iter().map(|c| c[1]).sum::<f64>() / n]
    };
    let scale = p.separation * p.sigma_u;
    let mut means = Matrix::zeros(p.classes, p.u_dim);
    for (k, c) in coords.iter().enumerate() {
        let a = (c[0] - centre[0]) * scale;
        let b = (c[1] - centre[1]) * scale;
        for j in 0..p.u_dim {
            means[(k, j)] = a * basis[(0, j)] + b * basis[(1, j)];
        }
    }
    let v_means = {
        let mut m = Matrix::zeros(p.classes, p.v_dim);
        for k in 0..p.classes {
            m.row_mut(k).copy_from_slice(&proj.matvec(means.row(k)));
        }
        m
    };
    let entity_map = shared_entity_map(p.classes, p.entity_vocab, p.pairs_per_class, &mut g);
    let world = BenchmarkWorld {
        class_count: p.classes,
        entity_vocab: p.entity_vocab,
        u_model: ClassConditional::Gaussian { class_means: means, within_class_sigma: p.sigma_u },
        v_spec: ViewSpec::Vector { dim: p.v_dim },
        paired: Some(ClassConditional::Gaussian { class_means: v_means.clone(), within_class_sigma: p.paired_sigma }),
        entity_map,
        none_class: None,
        seed: 0,
    };
    let faithful = Channel::LinearGaussian(LinearGaussianChannel::new(proj.clone(), vec![0.0; p.v_dim], p.gen_noise)?);
    let u_to_v = if p.collapse_prob > 0.0 {
        // Prototypes sit between classes so each attracts views from several of them.
        let mut protos = Matrix::zeros(p.prototypes, p.v_dim);
        for j in 0..p.prototypes {
            let t = if p.prototypes > 1 { j as f64 / (p.prototypes - 1) as f64 } else { 0.5 };
            let a = (t - 0.5) * 0.5 * scale;
            protos[(j, 0)] = a;
            protos[(j, 1)] = -a;
        }
        let collapse = Channel::PrototypeCollapse(PrototypeCollapseChannel {
            weight: proj.clone(),
            prototypes: protos,
            temperature: p.temperature,
            jitter_sigma: p.jitter,
        });
        Channel::Mixture(MixtureChannel {
            components: vec![
                MixtureComponent { weight: 1.0 - p.collapse_prob, channel: faithful },
                MixtureComponent { weight: p.collapse_prob, channel: collapse },
            ],
        })
    } else {
        faithful
    };
    let v_to_u =
        Channel::LinearGaussian(LinearGaussianChannel::new(proj.transpose(), vec![0.0; p.u_dim], p.back_noise)?);
    let preset = Preset { world, u_to_v, v_to_u };
    preset.world.validate()?;
    preset.u_to_v.validate()?;
    preset.v_to_u.validate()?;
    Ok(preset)
}

fn discrete_preset() -> Result<Preset> {
    let classes = 3;
    let alphabet_u = 6;
    let alphabet_v = 4;
    let mut probs = Matrix::zeros(classes, alphabet_u);
    for c in 0..classes {
        for a in 0..alphabet_u {
            probs[(c, a)] = if a / 2 == c { 0.35 } else { 0.075 };
        }
    }
    let mut uv = Matrix::zeros(alphabet_u, alphabet_v);
    for a in 0..alphabet_u {
        for b in 0..alphabet_v {
            uv[(a, b)] = if b == a % alphabet_v { 0.7 } else { 0.1 };
        }
    }
    // Each V symbol maps back to the U symbols congruent to it, plus a uniform floor.
    let mut vu = Matrix::zeros(alphabet_v, alphabet_u);
    for b in 0..alphabet_v {
        let targets: Vec<usize> = (0..alphabet_u).filter(|a| a % alphabet_v == b).collect();
        for a in 0..alphabet_u {
            let hit = if targets.contains(&a) { 0.8 / targets.len() as f64 } else { 0.0 };
            vu[(b, a)] = hit + 0.2 / alphabet_u as f64;
        }
    }
    let mut g = rng::seeded(GEOMETRY_SEED ^ 1);
    let world = BenchmarkWorld {
        class_count: classes,
        entity_vocab: 6,
        u_model: ClassConditional::Symbols { class_probs: probs, length: 12 },
        v_spec: ViewSpec::Discrete { alphabet: alphabet_v },
        paired: None,
        entity_map: shared_entity_map(classes, 6, 2, &mut g),
        none_class: None,
        seed: 0,
    };
    let preset = Preset {
        world,
        u_to_v: Channel::Discrete(DiscreteChannel::new(uv)?),
        v_to_u: Channel::Discrete(DiscreteChannel::new(vu)?),
    };
    preset.world.validate()?;
    Ok(preset)
}

/// Named world plus `(U→V, V→U)` generator pair.
pub fn lossy_world_preset(name: &str) -> Result<Preset> {
    match name {
        "clean" => gaussian_preset(&GaussianPresetParams::clean()),
        "noisy" => gaussian_preset(&GaussianPresetParams::noisy()),
        "collapse-heavy" => gaussian_preset(&GaussianPresetParams::collapse_heavy()),
        "discrete" => discrete_preset(),
        other => Err(ChannelError::UnknownPreset(other.to_string())),
    }
}
