//! Round-0 generation, chained regeneration rounds with per-round teacher
//! filtering, student training, inference and the ablation matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channels::{sample_channel, BenchmarkWorld, Channel, ChannelError, Preset, Split};
use crate::datamodel::{DatasetSchema, Instance, Label, Step, SyntheticView, View};
use crate::diversity::{self, DiversityError, DiversityRow};
use crate::info;
use crate::linalg;
use crate::models::{
    self, Classifier, ModelConfig, ModelError, Parameterized, StudentInput, StudentModel, TeacherModel, TeacherSample,
    TrainConfig, UnimodalInput, UnimodalModel,
};
use crate::rng;
use crate::selection::{self, Embedder, EmbedderKind, Selection, SelectionError, SelectionPolicy};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("instance {id} already has synthetic views")]
    PoolNotEmpty { id: u64 },
    #[error("instance {id} has {have} selected views, needs {need}")]
    InsufficientViews { id: u64, have: usize, need: usize },
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("unknown condition {name:?}; valid: {valid}")]
    UnknownCondition { name: String, valid: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of chained regeneration rounds `K`.
    pub rounds: u32,
    /// Round-0 views per real view.
    pub initial_views: usize,
    /// Views spawned per kept view in each round; length `K`.
    pub spawn: Vec<usize>,
    pub selection: SelectionPolicy,
    /// Select over the union of all instances instead of per instance.
    pub pooled_selection: bool,
    pub train_views: usize,
    pub infer_views: usize,
    /// Views generated per test instance before selection.
    pub infer_pool: usize,
    pub append_real_view: bool,
    /// Regenerate test views through every round instead of round 0 only.
    pub full_chain_inference: bool,
    /// Start each round's teacher from the previous one.
    pub warm_start_teacher: bool,
    pub unimodal: bool,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            initial_views: 30,
            spawn: vec![4, 1],
            selection: SelectionPolicy::TeacherLoss { keep_fraction: 0.6 },
            pooled_selection: false,
            train_views: 6,
            infer_views: 6,
            infer_pool: 30,
            append_real_view: true,
            full_chain_inference: false,
            warm_start_teacher: false,
            unimodal: false,
            teacher: TrainConfig { steps: 600, batch_size: 64, learning_rate: 0.01, ..TrainConfig::default() },
            student: TrainConfig { steps: 400, batch_size: 32, learning_rate: 0.01, ..TrainConfig::default() },
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.spawn.len() != self.rounds as usize {
            return bad("spawn must list one count per round");
        }
        if self.initial_views == 0 || self.train_views == 0 || self.infer_views == 0 || self.infer_pool == 0 {
            return bad("view counts must be positive");
        }
        self.selection.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        Ok(())
    }

    /// Closed-form per-instance `(pool, kept)` sizes for every round.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        let rho = self.selection.keep_fraction();
        let mut out = Vec::new();
        let mut pool = self.initial_views;
        for r in 0..=self.rounds as usize {
            let kept = selection::keep_count(pool, rho);
            out.push((pool, kept));
            if r < self.rounds as usize {
                pool = kept * (1 + self.spawn[r]);
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and test splits with the generator pair that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub schema: DatasetSchema,
    pub u_to_v: Channel,
    pub v_to_u: Channel,
}

impl Benchmark {
    pub fn from_preset(preset: &Preset, seed: u64, train_per_class: usize, test_per_class: usize) -> Result<Self> {
        let world: BenchmarkWorld = preset.world.clone().with_seed(seed);
        world.validate()?;
        Ok(Self {
            train: world.generate_split(train_per_class, Split::Train),
            test: world.generate_split(test_per_class, Split::Test),
            schema: world.schema(),
            u_to_v: preset.u_to_v.clone(),
            v_to_u: preset.v_to_u.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy over everything; micro precision/recall/F1 over the
/// non-`none_class` labels.
pub fn compute_metrics(predictions: &[Label], labels: &[Label], none_class: Option<Label>) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(PipelineError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let n = labels.len();
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let positive = |l: &Label| Some(*l) != none_class;
    let tp = predictions.iter().zip(labels).filter(|(p, y)| p == y && positive(p)).count();
    let predicted = predictions.iter().filter(|p| positive(p)).count();
    let actual = labels.iter().filter(|y| positive(y)).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, actual);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics { accuracy: ratio(correct, n), precision, recall, f1 })
}

/// One selection round as seen by every instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub pool_min: usize,
    pub pool_max: usize,
    pub kept_min: usize,
    pub kept_max: usize,
    /// Parameter hash of the freshly initialised teacher, when one is trained.
    pub teacher_init_hash: Option<String>,
    pub mean_kept_loss: Option<f64>,
    pub mean_discarded_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub condition: String,
    pub config_hash: String,
    pub rounds: Vec<RoundRecord>,
    pub metrics: Metrics,
    pub diversity: Vec<DiversityRow>,
}

/// Per-instance ranking from one round: pool indices kept and discarded,
/// with the score each was ranked by (lower is better).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: u32,
    pub teacher: Option<TeacherModel>,
    pub instances: Vec<InstanceTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTrace {
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub selection: Selection,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub dataset: Vec<Instance>,
    pub traces: Vec<RoundTrace>,
    pub predictions: Vec<Label>,
}

fn view_stream(seed: u64, tag: &str, id: u64, round: u32, index: usize) -> rng::Stream {
    rng::stream(seed, tag, &[id, u64::from(round), index as u64])
}

/// Gives every instance `m0` round-0 views of its real view.
pub fn run_round0(dataset: &mut [Instance], u_to_v: &Channel, m0: usize, seed: u64) -> Result<()> {
    if let Some(inst) = dataset.iter().find(|i| !i.synthetic_pool.is_empty()) {
        return Err(PipelineError::PoolNotEmpty { id: inst.id });
    }
    dataset.par_iter_mut().try_for_each(|inst| -> Result<()> {
        for j in 0..m0 {
            let mut r = view_stream(seed, "gen", inst.id, 0, j);
            let v = sample_channel(u_to_v, &inst.real_view, &mut r)?;
            inst.synthetic_pool.push(SyntheticView::new(v.data, 0, Step::UToV, 0));
        }
        Ok(())
    })
}

/// Each view kept in round `round − 1` spawns `g` children through V→U→V.
pub fn spawn_round(
    dataset: &mut [Instance],
    round: u32,
    v_to_u: &Channel,
    u_to_v: &Channel,
    g: usize,
    seed: u64,
) -> Result<()> {
    if round == 0 {
        return Err(PipelineError::Config("round 0 has no parents".into()));
    }
    dataset.par_iter_mut().try_for_each(|inst| -> Result<()> {
        let parents: Vec<usize> = (0..inst.synthetic_pool.len())
            .filter(|&k| {
                let s = &inst.synthetic_pool[k];
                s.is_v_side() && s.kept_through == Some(round - 1)
            })
            .collect();
        for (p, &k) in parents.iter().enumerate() {
            for c in 0..g {
                let mut r = view_stream(seed, "gen", inst.id, round, p * g + c);
                let parent = inst.synthetic_pool[k].view.clone();
                let u = sample_channel(v_to_u, &parent, &mut r)?;
                let v = sample_channel(u_to_v, &u, &mut r)?;
                inst.synthetic_pool.push(SyntheticView::new(u.data, round, Step::VToU, k + 1));
                let u_id = inst.synthetic_pool.len();
                inst.synthetic_pool.push(SyntheticView::new(v.data, round, Step::UToV, u_id));
            }
        }
        Ok(())
    })
}

/// Pool indices competing in round `round`: that round's new V views plus
/// the survivors of the previous round.
pub fn round_candidates(inst: &Instance, round: u32) -> Vec<usize> {
    (0..inst.synthetic_pool.len())
        .filter(|&k| {
            let s = &inst.synthetic_pool[k];
            s.is_v_side() && (s.round == round || (round > 0 && s.kept_through == Some(round - 1)))
        })
        .collect()
}

fn teacher_samples(dataset: &[Instance], round: u32, schema: &DatasetSchema) -> Result<Vec<(TeacherSample, Label)>> {
    let mut out = Vec::new();
    for inst in dataset {
        for k in round_candidates(inst, round) {
            let s = TeacherSample::from_view(&inst.synthetic_pool[k].view, inst.entities, &schema.v_spec)?;
            out.push((s, inst.label));
        }
    }
    Ok(out)
}

/// `−ln max_y p(y | v)`: the loss under the teacher's own best guess,
/// used where the true label is unknown.
pub fn confidence_loss(teacher: &TeacherModel, sample: &TeacherSample) -> Result<f64> {
    let logits = teacher.logits(sample)?;
    Ok(linalg::logsumexp(&logits) - logits[linalg::argmax(&logits)])
}

fn uniform_scores(seed: u64, id: u64, round: u32, n: usize) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, "rank", &[id, u64::from(round)]);
    (0..n).map(|_| r.random::<f64>()).collect()
}

struct RoundContext<'a> {
    schema: &'a DatasetSchema,
    cfg: &'a PipelineConfig,
    embedder: Option<&'a Embedder>,
}

/// Trains this round's teacher (if the policy uses one), scores every
/// candidate and marks the kept set.
fn select_round(
    dataset: &mut [Instance],
    round: u32,
    ctx: &RoundContext<'_>,
    previous: Option<&TeacherModel>,
) -> Result<(RoundRecord, RoundTrace)> {
    let cfg = ctx.cfg;
    let rho = cfg.selection.keep_fraction();
    let mut teacher = None;
    let mut init_hash = None;
    if let SelectionPolicy::TeacherLoss { .. } = cfg.selection {
        let init = match (cfg.warm_start_teacher, previous) {
            (true, Some(t)) => t.clone(),
            _ => TeacherModel::new(
                ctx.schema,
                &cfg.model,
                &mut rng::stream(cfg.seed, "teacher-init", &[u64::from(round)]),
            ),
        };
        init_hash = Some(format!("{:016x}", init.param_hash()));
        let samples = teacher_samples(dataset, round, ctx.schema)?;
        let tcfg = TrainConfig {
            seed: rng::derive_seed(cfg.seed, "teacher-train", &[u64::from(round)]),
            ..cfg.teacher.clone()
        };
        let (trained, _) = models::train(init, &samples, &tcfg)?;
        teacher = Some(trained);
    }
    let scored: Vec<(Vec<usize>, Vec<f64>)> = dataset
        .par_iter()
        .map(|inst| -> Result<(Vec<usize>, Vec<f64>)> {
            let cand = round_candidates(inst, round);
            let scores = match &cfg.selection {
                SelectionPolicy::TeacherLoss { .. } => {
                    let t = teacher.as_ref().expect("teacher trained");
                    cand.iter()
                        .map(|&k| {
                            let s = TeacherSample::from_view(
                                &inst.synthetic_pool[k].view,
                                inst.entities,
                                &ctx.schema.v_spec,
                            )?;
                            Ok(t.loss(&s, inst.label)?)
                        })
                        .collect::<Result<Vec<f64>>>()?
                }
                SelectionPolicy::Similarity { .. } => {
                    let e = ctx.embedder.expect("embedder fitted");
                    let anchor = e.embed(&inst.real_view);
                    cand.iter().map(|&k| -selection::cosine(&e.embed(&inst.synthetic_pool[k].view), &anchor)).collect()
                }
                SelectionPolicy::Random { .. } | SelectionPolicy::KeepAll => {
                    uniform_scores(cfg.seed, inst.id, round, cand.len())
                }
            };
            Ok((cand, scores))
        })
        .collect::<Result<_>>()?;

    let selections: Vec<Selection> = if cfg.pooled_selection {
        let flat: Vec<f64> = scored.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let global = match &cfg.selection {
            SelectionPolicy::Random { seed, .. } => {
                selection::filter_random(flat.len(), rho, rng::derive_seed(*seed, "round", &[u64::from(round)]))?
            }
            SelectionPolicy::KeepAll => selection::filter_scores(&flat, 1.0)?,
            _ => selection::filter_scores(&flat, rho)?,
        };
        let mut keep = vec![false; flat.len()];
        global.kept.iter().for_each(|&i| keep[i] = true);
        let mut offset = 0;
        scored
            .iter()
            .map(|(c, _)| {
                let (kept, discarded): (Vec<usize>, Vec<usize>) = (0..c.len()).partition(|&i| keep[offset + i]);
                offset += c.len();
                Selection { kept, discarded }
            })
            .collect()
    } else {
        dataset
            .iter()
            .zip(&scored)
            .map(|(inst, (c, s))| match &cfg.selection {
                SelectionPolicy::Random { seed, .. } => selection::filter_random(
                    c.len(),
                    rho,
                    rng::derive_seed(*seed, "round", &[inst.id, u64::from(round)]),
                ),
                SelectionPolicy::KeepAll => selection::filter_scores(s, 1.0),
                _ => selection::filter_scores(s, rho),
            })
            .collect::<std::result::Result<_, _>>()?
    };

    let is_teacher = teacher.is_some();
    let mut traces = Vec::with_capacity(dataset.len());
    let (mut kept_sum, mut kept_n, mut drop_sum, mut drop_n) = (0.0, 0usize, 0.0, 0usize);
    for ((inst, (cand, scores)), sel) in dataset.iter_mut().zip(scored).zip(selections) {
        for (i, &k) in cand.iter().enumerate() {
            let v = &mut inst.synthetic_pool[k];
            if is_teacher {
                v.teacher_loss = Some(scores[i]);
            }
            v.selected = false;
        }
        for &i in &sel.kept {
            let v = &mut inst.synthetic_pool[cand[i]];
            v.selected = true;
            v.kept_through = Some(round);
            kept_sum += scores[i];
        }
        kept_n += sel.kept.len();
        drop_sum += sel.discarded.iter().map(|&i| scores[i]).sum::<f64>();
        drop_n += sel.discarded.len();
        traces.push(InstanceTrace { candidates: cand, scores, selection: sel });
    }
    let pools: Vec<usize> = traces.iter().map(|t| t.candidates.len()).collect();
    let kept: Vec<usize> = traces.iter().map(|t| t.selection.kept.len()).collect();
    let mean = |s: f64, n: usize| if is_teacher && n > 0 { Some(s / n as f64) } else { None };
    let record = RoundRecord {
        round,
        pool_min: pools.iter().copied().min().unwrap_or(0),
        pool_max: pools.iter().copied().max().unwrap_or(0),
        kept_min: kept.iter().copied().min().unwrap_or(0),
        kept_max: kept.iter().copied().max().unwrap_or(0),
        teacher_init_hash: init_hash,
        mean_kept_loss: mean(kept_sum, kept_n),
        mean_discarded_loss: mean(drop_sum, drop_n),
    };
    Ok((record, RoundTrace { round, teacher, instances: traces }))
}

/// Generation and selection for every round; returns the per-round records
/// and traces. The final trace ranks the views the student will see.
pub fn run_selection_rounds(
    dataset: &mut [Instance],
    bench: &Benchmark,
    cfg: &PipelineConfig,
) -> Result<(Vec<RoundRecord>, Vec<RoundTrace>, Option<Embedder>)> {
    cfg.validate()?;
    run_round0(dataset, &bench.u_to_v, cfg.initial_views, cfg.seed)?;
    let embedder = match &cfg.selection {
        SelectionPolicy::Similarity { embedder, .. } => {
            Some(build_embedder(dataset, &bench.schema, *embedder, cfg.seed)?)
        }
        _ => None,
    };
    let ctx = RoundContext { schema: &bench.schema, cfg, embedder: embedder.as_ref() };
    let mut records = Vec::new();
    let mut traces: Vec<RoundTrace> = Vec::new();
    for round in 0..=cfg.rounds {
        if round > 0 {
            spawn_round(dataset, round, &bench.v_to_u, &bench.u_to_v, cfg.spawn[round as usize - 1], cfg.seed)?;
        }
        let previous = traces.last().and_then(|t| t.teacher.as_ref());
        let (rec, trace) = select_round(dataset, round, &ctx, previous)?;
        records.push(rec);
        traces.push(trace);
    }
    Ok((records, traces, embedder))
}

fn build_embedder(dataset: &[Instance], schema: &DatasetSchema, kind: EmbedderKind, seed: u64) -> Result<Embedder> {
    Ok(match kind {
        EmbedderKind::Random => Embedder::random(schema.u_spec, schema.v_spec, schema.v_spec.feature_dim(), seed),
        EmbedderKind::Fitted => {
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = dataset
                .iter()
                .flat_map(|inst| {
                    let u = inst.real_view.data.features(&schema.u_spec);
                    inst.synthetic_pool
                        .iter()
                        .filter(|s| s.round == 0)
                        .map(move |s| (u.clone(), s.view.data.features(&schema.v_spec)))
                })
                .collect();
            Embedder::fit(schema.u_spec, schema.v_spec, &pairs, 1e-3)?
        }
    })
}

/// Lowest-scoring `n` kept views of each instance, as pool indices.
fn pick_training_views(trace: &RoundTrace, n: usize, ids: &[u64]) -> Result<Vec<Vec<usize>>> {
    trace
        .instances
        .iter()
        .zip(ids)
        .map(|(t, id)| {
            if t.selection.kept.len() < n {
                return Err(PipelineError::InsufficientViews { id: *id, have: t.selection.kept.len(), need: n });
            }
            let mut kept = t.selection.kept.clone();
            kept.sort_by(|&a, &b| t.scores[a].total_cmp(&t.scores[b]).then(a.cmp(&b)));
            Ok(kept[..n].iter().map(|&i| t.candidates[i]).collect())
        })
        .collect()
}

/// Student fed the real view plus `n_train` selected synthetic views per instance.
pub fn train_student(
    dataset: &[Instance],
    picks: &[Vec<usize>],
    schema: &DatasetSchema,
    cfg: &PipelineConfig,
) -> Result<StudentModel> {
    let model = StudentModel::new(schema, &cfg.model, &mut rng::stream(cfg.seed, "student-init", &[]));
    let data = dataset
        .iter()
        .zip(picks)
        .map(|(inst, pick)| {
            let synth: Vec<View> = pick.iter().map(|&k| inst.synthetic_pool[k].view.clone()).collect();
            Ok((model.input(&inst.real_view, &synth, inst.entities)?, inst.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let scfg = TrainConfig { seed: rng::derive_seed(cfg.seed, "student-train", &[]), ..cfg.student.clone() };
    Ok(models::train(model, &data, &scfg)?.0)
}

pub fn train_unimodal(dataset: &[Instance], schema: &DatasetSchema, cfg: &PipelineConfig) -> Result<UnimodalModel> {
    let model = UnimodalModel::new(schema, &cfg.model, &mut rng::stream(cfg.seed, "student-init", &[]));
    let data: Vec<(UnimodalInput, Label)> = dataset
        .iter()
        .map(|inst| Ok((model.input(&inst.real_view, inst.entities)?, inst.label)))
        .collect::<Result<_>>()?;
    let scfg = TrainConfig { seed: rng::derive_seed(cfg.seed, "student-train", &[]), ..cfg.student.clone() };
    Ok(models::train(model, &data, &scfg)?.0)
}

/// What inference needs beyond the student.
pub struct InferenceContext<'a> {
    pub bench: &'a Benchmark,
    pub cfg: &'a PipelineConfig,
    /// One teacher per round; only the teacher policy has them.
    pub teachers: Vec<&'a TeacherModel>,
    pub embedder: Option<&'a Embedder>,
}

/// The synthetic set the student sees for a test instance, including the
/// appended real V-side view when there is one.
pub fn inference_views(inst: &Instance, ctx: &InferenceContext<'_>) -> Result<Vec<View>> {
    let cfg = ctx.cfg;
    let schema = &ctx.bench.schema;
    let mut pool: Vec<View> = (0..cfg.infer_pool)
        .map(|j| sample_channel(&ctx.bench.u_to_v, &inst.real_view, &mut view_stream(cfg.seed, "infer", inst.id, 0, j)))
        .collect::<std::result::Result<_, _>>()?;
    let score = |views: &[View], teacher: Option<&TeacherModel>, round: u32| -> Result<Vec<f64>> {
        match (&cfg.selection, teacher) {
            (SelectionPolicy::TeacherLoss { .. }, Some(t)) => views
                .iter()
                .map(|v| confidence_loss(t, &TeacherSample::from_view(v, inst.entities, &schema.v_spec)?))
                .collect(),
            (SelectionPolicy::Similarity { .. }, _) => {
                let e = ctx.embedder.expect("embedder fitted");
                let anchor = e.embed(&inst.real_view);
                Ok(views.iter().map(|v| -selection::cosine(&e.embed(v), &anchor)).collect())
            }
            _ => Ok(uniform_scores(rng::derive_seed(cfg.seed, "infer-rank", &[]), inst.id, round, views.len())),
        }
    };
    if cfg.full_chain_inference {
        let rho = cfg.selection.keep_fraction();
        for round in 0..cfg.rounds {
            let scores = score(&pool, ctx.teachers.get(round as usize).copied(), round)?;
            let keep_frac = if matches!(cfg.selection, SelectionPolicy::KeepAll) { 1.0 } else { rho };
            let sel = selection::filter_scores(&scores, keep_frac)?;
            let mut next: Vec<View> = sel.kept.iter().map(|&i| pool[i].clone()).collect();
            let g = cfg.spawn[round as usize];
            for (p, &i) in sel.kept.iter().enumerate() {
                for c in 0..g {
                    let mut r = view_stream(cfg.seed, "infer", inst.id, round + 1, p * g + c);
                    let u = sample_channel(&ctx.bench.v_to_u, &pool[i], &mut r)?;
                    next.push(sample_channel(&ctx.bench.u_to_v, &u, &mut r)?);
                }
            }
            pool = next;
        }
    }
    let scores = score(&pool, ctx.teachers.last().copied(), cfg.rounds + 1)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut chosen: Vec<View> = order.iter().take(cfg.infer_views).map(|&i| pool[i].clone()).collect();
    if cfg.append_real_view {
        if let Some(v) = &inst.paired_view {
            chosen.push(v.clone());
        }
    }
    Ok(chosen)
}

pub fn infer(student: &StudentModel, inst: &Instance, ctx: &InferenceContext<'_>) -> Result<Label> {
    let views = inference_views(inst, ctx)?;
    let input: StudentInput = student.input(&inst.real_view, &views, inst.entities)?;
    Ok(Label(linalg::argmax(&student.logits(&input)?) as u32))
}

/// Full run on one benchmark: selection rounds, student, test metrics and
/// the diversity table.
pub fn run_pipeline(
    bench: &Benchmark,
    cfg: &PipelineConfig,
    condition: &str,
    diversity_grid: &[(usize, usize)],
) -> Result<RunOutput> {
    cfg.validate()?;
    let labels: Vec<Label> = bench.test.iter().map(|i| i.label).collect();
    if cfg.unimodal {
        let model = train_unimodal(&bench.train, &bench.schema, cfg)?;
        let predictions: Vec<Label> = bench
            .test
            .par_iter()
            .map(|inst| -> Result<Label> {
                let x = model.input(&inst.real_view, inst.entities)?;
                Ok(Label(linalg::argmax(&model.logits(&x)?) as u32))
            })
            .collect::<Result<_>>()?;
        let metrics = compute_metrics(&predictions, &labels, bench.schema.none_class)?;
        let report = RunReport {
            condition: condition.into(),
            config_hash: cfg.hash(),
            rounds: Vec::new(),
            metrics,
            diversity: Vec::new(),
        };
        return Ok(RunOutput { report, dataset: bench.train.clone(), traces: Vec::new(), predictions });
    }
    let mut dataset = bench.train.clone();
    let (records, traces, embedder) = run_selection_rounds(&mut dataset, bench, cfg)?;
    let ids: Vec<u64> = dataset.iter().map(|i| i.id).collect();
    let last = traces.last().expect("at least round 0");
    let picks = pick_training_views(last, cfg.train_views, &ids)?;
    let student = train_student(&dataset, &picks, &bench.schema, cfg)?;
    let ctx = InferenceContext {
        bench,
        cfg,
        teachers: traces.iter().filter_map(|t| t.teacher.as_ref()).collect(),
        embedder: embedder.as_ref(),
    };
    let predictions: Vec<Label> =
        bench.test.par_iter().map(|inst| infer(&student, inst, &ctx)).collect::<Result<_>>()?;
    let metrics = compute_metrics(&predictions, &labels, bench.schema.none_class)?;
    let stages = diversity::dataset_stages(&dataset, &bench.schema, cfg.rounds);
    let mut table = Vec::new();
    for &(d, n) in diversity_grid {
        if let Ok(rows) = diversity::diversity_report(&stages, d, n, cfg.seed) {
            table.extend(rows);
        }
    }
    let report =
        RunReport { condition: condition.into(), config_hash: cfg.hash(), rounds: records, metrics, diversity: table };
    Ok(RunOutput { report, dataset, traces, predictions })
}

pub const CONDITIONS: &[&str] = &["full", "no_ccg", "similarity_teacher", "random_teacher", "no_teacher", "unimodal"];

/// Config for one ablation condition, derived from the single-round setup.
pub fn condition_config(base: &PipelineConfig, condition: &str) -> Result<PipelineConfig> {
    let rho = base.selection.keep_fraction();
    let g = base.spawn.first().copied().unwrap_or(4);
    let mut cfg = PipelineConfig { rounds: 1, spawn: vec![g], unimodal: false, ..base.clone() };
    match condition {
        "full" => cfg.selection = SelectionPolicy::TeacherLoss { keep_fraction: rho },
        "no_ccg" => {
            cfg.rounds = 0;
            cfg.spawn.clear();
            cfg.selection = SelectionPolicy::TeacherLoss { keep_fraction: rho };
        }
        "similarity_teacher" => {
            cfg.selection = SelectionPolicy::Similarity { keep_fraction: rho, embedder: EmbedderKind::Fitted }
        }
        "random_teacher" => cfg.selection = SelectionPolicy::Random { keep_fraction: rho, seed: base.seed },
        "no_teacher" => cfg.selection = SelectionPolicy::KeepAll,
        "unimodal" => cfg.unimodal = true,
        other => {
            return Err(PipelineError::UnknownCondition { name: other.into(), valid: CONDITIONS.join(", ") });
        }
    }
    Ok(cfg)
}

pub fn check_conditions(conditions: &[String]) -> Result<()> {
    for c in conditions {
        if !CONDITIONS.contains(&c.as_str()) {
            return Err(PipelineError::UnknownCondition { name: c.clone(), valid: CONDITIONS.join(", ") });
        }
    }
    Ok(())
}

/// One row per condition on a shared benchmark and seed.
pub fn run_ablation(bench: &Benchmark, base: &PipelineConfig, conditions: &[String]) -> Result<Vec<RunReport>> {
    check_conditions(conditions)?;
    conditions.iter().map(|c| Ok(run_pipeline(bench, &condition_config(base, c)?, c, &[])?.report)).collect()
}

/// One-sided sign test: `P(X ≥ wins)` for `X ~ Bin(wins + losses, ½)`; ties are dropped.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut p = 0.0;
    let mut coef = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            coef = coef * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += coef;
        }
    }
    p / 2f64.powi(n as i32)
}

/// Empirical cross-entropy bound of the round's teacher on one set of views.
pub fn subset_bound(
    teacher: &TeacherModel,
    inst: &Instance,
    pool_indices: &[usize],
    schema: &DatasetSchema,
) -> Result<f64> {
    let samples: Vec<(TeacherSample, Label)> = pool_indices
        .iter()
        .map(|&k| {
            Ok((TeacherSample::from_view(&inst.synthetic_pool[k].view, inst.entities, &schema.v_spec)?, inst.label))
        })
        .collect::<Result<_>>()?;
    let logits: Vec<Vec<f64>> =
        samples.iter().map(|(s, _)| teacher.logits(s)).collect::<std::result::Result<_, _>>()?;
    let indexed: Vec<(usize, Label)> = samples.iter().enumerate().map(|(i, (_, y))| (i, *y)).collect();
    info::mi_lower_bound(|i: &usize, y| logits[*i][y], &indexed, schema.class_count)
        .map(|b| b.bound)
        .map_err(|e| PipelineError::Config(e.to_string()))
}
