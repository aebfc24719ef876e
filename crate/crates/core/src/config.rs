//! Experiment configuration: one TOML file, with a few scalar keys
//! overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{gaussian_preset, lossy_world_preset, ChannelError, GaussianPresetParams, Preset, PRESET_NAMES};
use crate::models::{ModelConfig, TrainConfig};
use crate::pipeline::{self, Benchmark, PipelineConfig, PipelineError};
use crate::selection::{EmbedderKind, SelectionPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("seed required")]
    MissingSeed,
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset {name:?}; valid: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("channel overrides only apply to gaussian presets, not {0:?}")]
    Overrides(String),
    #[error("unknown selection policy {0:?}; valid: teacher, similarity, random, none")]
    UnknownPolicy(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub preset: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { preset: "clean".into(), train_per_class: 20, test_per_class: 200 }
    }
}

/// Optional overrides of the continuous preset knobs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub separation: Option<f64>,
    pub gen_noise: Option<f64>,
    pub back_noise: Option<f64>,
    pub paired_sigma: Option<f64>,
    pub collapse_prob: Option<f64>,
    pub prototypes: Option<usize>,
}

impl ChannelSection {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    fn apply(&self, p: &mut GaussianPresetParams) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.separation, self.separation);
        set(&mut p.gen_noise, self.gen_noise);
        set(&mut p.back_noise, self.back_noise);
        set(&mut p.paired_sigma, self.paired_sigma);
        set(&mut p.collapse_prob, self.collapse_prob);
        if let Some(k) = self.prototypes {
            p.prototypes = k;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub rounds: u32,
    pub initial_views: usize,
    pub spawn: Vec<usize>,
    pub train_views: usize,
    pub infer_views: usize,
    pub infer_pool: usize,
    pub append_real_view: bool,
    pub pooled_selection: bool,
    pub full_chain_inference: bool,
    pub warm_start_teacher: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            rounds: p.rounds,
            initial_views: p.initial_views,
            spawn: p.spawn,
            train_views: p.train_views,
            infer_views: p.infer_views,
            infer_pool: p.infer_pool,
            append_real_view: p.append_real_view,
            pooled_selection: p.pooled_selection,
            full_chain_inference: p.full_chain_inference,
            warm_start_teacher: p.warm_start_teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// `teacher`, `similarity`, `random` or `none`.
    pub policy: String,
    pub keep_fraction: f64,
    pub embedder: EmbedderKind,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self { policy: "teacher".into(), keep_fraction: 0.6, embedder: EmbedderKind::Fitted }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversitySection {
    pub d_pca: Vec<usize>,
    pub components: Vec<usize>,
    /// Dataset with provenance to analyse; when absent the configured run is executed first.
    pub dataset: Option<PathBuf>,
}

impl Default for DiversitySection {
    fn default() -> Self {
        Self { d_pca: vec![2, 4], components: vec![3], dataset: None }
    }
}

impl DiversitySection {
    pub fn grid(&self) -> Vec<(usize, usize)> {
        self.d_pca.iter().flat_map(|&d| self.components.iter().map(move |&n| (d, n))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub conditions: Vec<String>,
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { conditions: pipeline::CONDITIONS.iter().map(|s| s.to_string()).collect(), seeds: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub benchmark: BenchmarkSection,
    pub channel: ChannelSection,
    pub pipeline: PipelineSection,
    pub selection: SelectionSection,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub model: ModelConfig,
    pub diversity: DiversitySection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: None,
            benchmark: BenchmarkSection::default(),
            channel: ChannelSection::default(),
            pipeline: PipelineSection::default(),
            selection: SelectionSection::default(),
            teacher: p.teacher,
            student: p.student,
            model: p.model,
            diversity: DiversitySection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.seed()?;
        self.preset()?;
        self.pipeline_config()?.validate()?;
        pipeline::check_conditions(&self.ablation.conditions)?;
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset, ConfigError> {
        let name = self.benchmark.preset.as_str();
        if !PRESET_NAMES.contains(&name) {
            return Err(ConfigError::UnknownPreset { name: name.into(), valid: PRESET_NAMES.join(", ") });
        }
        if self.channel.is_empty() {
            return Ok(lossy_world_preset(name)?);
        }
        let mut params = match name {
            "clean" => GaussianPresetParams::clean(),
            "noisy" => GaussianPresetParams::noisy(),
            "collapse-heavy" => GaussianPresetParams::collapse_heavy(),
            other => return Err(ConfigError::Overrides(other.into())),
        };
        self.channel.apply(&mut params);
        Ok(gaussian_preset(&params)?)
    }

    pub fn benchmark_with_seed(&self, seed: u64) -> Result<Benchmark, ConfigError> {
        Ok(Benchmark::from_preset(
            &self.preset()?,
            seed,
            self.benchmark.train_per_class,
            self.benchmark.test_per_class,
        )?)
    }

    pub fn selection_policy(&self, seed: u64) -> Result<SelectionPolicy, ConfigError> {
        let rho = self.selection.keep_fraction;
        Ok(match self.selection.policy.as_str() {
            "teacher" => SelectionPolicy::TeacherLoss { keep_fraction: rho },
            "similarity" => SelectionPolicy::Similarity { keep_fraction: rho, embedder: self.selection.embedder },
            "random" => SelectionPolicy::Random { keep_fraction: rho, seed },
            "none" => SelectionPolicy::KeepAll,
            other => return Err(ConfigError::UnknownPolicy(other.into())),
        })
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        self.pipeline_config_with_seed(self.seed()?)
    }

    pub fn pipeline_config_with_seed(&self, seed: u64) -> Result<PipelineConfig, ConfigError> {
        let p = &self.pipeline;
        Ok(PipelineConfig {
            rounds: p.rounds,
            initial_views: p.initial_views,
            spawn: p.spawn.clone(),
            selection: self.selection_policy(seed)?,
            pooled_selection: p.pooled_selection,
            train_views: p.train_views,
            infer_views: p.infer_views,
            infer_pool: p.infer_pool,
            append_real_view: p.append_real_view,
            full_chain_inference: p.full_chain_inference,
            warm_start_teacher: p.warm_start_teacher,
            unimodal: false,
            teacher: self.teacher.clone(),
            student: self.student.clone(),
            model: self.model.clone(),
            seed,
        })
    }

    pub fn hash(&self) -> String {
        pipeline::hash_json(self)
    }
}
