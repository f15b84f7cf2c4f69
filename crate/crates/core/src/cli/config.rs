//! Strict JSON experiment configuration.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Paths are validated at load time. The configuration hash tying
//! checkpoints to their generating run covers the object, scene, model,
//! and attack sections (the eval and output sections may change freely
//! between resume and evaluation).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackConfig, AttackMode};
use crate::depthmodel::DepthConversion;
use crate::evalrobust::AlphaReference;
use crate::losses::LossWeights;
use crate::maskgen::ShapeFamily;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObjectSection {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenesSection {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Further,
    Disappear,
    Closer,
    Offset,
    Nontargeted,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    pub shape: ShapeFamily,
    pub steps: u64,
    pub batch: usize,
    pub budget: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lr_patch: f64,
    pub lr_shape: f64,
    pub decay_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_period: Option<u64>,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<PathBuf>,
}

fn default_log_every() -> u64 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_alpha_reference")]
    pub alpha_reference: AlphaReference,
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
    #[serde(default = "default_jpeg_qualities")]
    pub jpeg_qualities: Vec<u32>,
    #[serde(default = "default_bit_depths")]
    pub bit_depths: Vec<u32>,
    #[serde(default = "default_noise_sigmas")]
    pub noise_sigmas: Vec<f64>,
    #[serde(default = "default_median_kernels")]
    pub median_kernels: Vec<usize>,
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    #[serde(default = "default_max_depth")]
    pub max_depth: f64,
}

fn default_alpha_reference() -> AlphaReference {
    AlphaReference::Benign
}

fn default_eval_batch() -> usize {
    8
}

fn default_jpeg_qualities() -> Vec<u32> {
    vec![90, 70, 50, 30, 10]
}

fn default_bit_depths() -> Vec<u32> {
    vec![8, 6, 4, 3, 2, 1]
}

fn default_noise_sigmas() -> Vec<f64> {
    vec![0.02, 0.05, 0.1, 0.2]
}

fn default_median_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}

fn default_min_depth() -> f64 {
    0.1
}

fn default_max_depth() -> f64 {
    100.0
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alpha_reference: default_alpha_reference(),
            batch: default_eval_batch(),
            jpeg_qualities: default_jpeg_qualities(),
            bit_depths: default_bit_depths(),
            noise_sigmas: default_noise_sigmas(),
            median_kernels: default_median_kernels(),
            min_depth: default_min_depth(),
            max_depth: default_max_depth(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "default_de_generations")]
    pub de_generations: usize,
    #[serde(default = "default_de_population")]
    pub de_population: usize,
    #[serde(default = "default_de_control_points")]
    pub de_control_points: usize,
    #[serde(default = "default_de_fitness_batch")]
    pub de_fitness_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_max_evals: Option<usize>,
    /// Steps for the stage-one full-object texture optimization; defaults
    /// to the attack section's step count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub de_stage1_steps: Option<u64>,
}

fn default_de_generations() -> usize {
    10
}

fn default_de_population() -> usize {
    30
}

fn default_de_control_points() -> usize {
    8
}

fn default_de_fitness_batch() -> usize {
    2
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            de_generations: default_de_generations(),
            de_population: default_de_population(),
            de_control_points: default_de_control_points(),
            de_fitness_batch: default_de_fitness_batch(),
            de_max_evals: None,
            de_stage1_steps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub object: ObjectSection,
    pub scenes: ScenesSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [&self.object.image, &self.object.mask, &self.scenes.directory] {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        match (&self.model.surrogate_seed, &self.model.weights) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "model: set either surrogate_seed or weights, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "model: one of surrogate_seed or weights is required".into(),
                ))
            }
            (None, Some(w)) => {
                if !w.exists() {
                    return Err(ConfigError::MissingPath(w.clone()));
                }
            }
            _ => {}
        }
        if let Some(p) = &self.attack.palette {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        if self.attack.mode == ModeName::Offset && self.attack.offset.is_none() {
            return Err(ConfigError::Invalid(
                "attack: offset mode requires the `offset` field".into(),
            ));
        }
        if self.attack.steps == 0 {
            return Err(ConfigError::Invalid("attack: steps must be >= 1".into()));
        }
        if self.attack.batch == 0 {
            return Err(ConfigError::Invalid("attack: batch must be >= 1".into()));
        }
        if !(self.attack.budget > 0.0 && self.attack.budget <= 1.0) {
            return Err(ConfigError::Invalid(
                "attack: budget must lie in (0, 1]".into(),
            ));
        }
        if self.attack.lr_patch <= 0.0 || self.attack.lr_shape <= 0.0 {
            return Err(ConfigError::Invalid(
                "attack: learning rates must be positive".into(),
            ));
        }
        for &l in [
            self.attack.lambda1,
            self.attack.lambda2,
            self.attack.lambda3,
            self.attack.lambda4,
        ]
        .iter()
        {
            if !(l.is_finite() && l >= 0.0) {
                return Err(ConfigError::Invalid(
                    "attack: lambda weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn attack_mode(&self) -> AttackMode {
        match self.attack.mode {
            ModeName::Further => AttackMode::Further,
            ModeName::Disappear => AttackMode::Disappear,
            ModeName::Closer => AttackMode::Closer,
            ModeName::Offset => AttackMode::Offset(self.attack.offset.unwrap_or(0.0)),
            ModeName::Nontargeted => AttackMode::Nontargeted,
        }
    }

    /// The in-memory attack configuration this experiment describes.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            mode: self.attack_mode(),
            family: self.attack.shape,
            steps: self.attack.steps,
            batch: self.attack.batch,
            weights: LossWeights {
                lambda1: self.attack.lambda1,
                lambda2: self.attack.lambda2,
                lambda3: self.attack.lambda3,
                lambda4: self.attack.lambda4,
            },
            budget: self.attack.budget,
            lr_patch: self.attack.lr_patch,
            lr_shape: self.attack.lr_shape,
            decay_factor: self.attack.decay_factor,
            decay_period: self.attack.decay_period,
            seed: self.attack.seed,
            log_every: self.attack.log_every,
            alpha_reference: self.eval.alpha_reference,
            conversion: DepthConversion {
                min_depth: self.eval.min_depth,
                max_depth: self.eval.max_depth,
            },
            optimize_shape: true,
        }
    }

    /// Canonical serialization; field order is fixed by the struct
    /// definitions, so round trips are stable.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a over the run-defining sections.
    pub fn state_hash(&self) -> u64 {
        #[derive(Serialize)]
        struct HashedParts<'a> {
            object: &'a ObjectSection,
            scenes: &'a ScenesSection,
            model: &'a ModelSection,
            attack: &'a AttackSection,
        }
        let bytes = serde_json::to_vec(&HashedParts {
            object: &self.object,
            scenes: &self.scenes,
            model: &self.model,
            attack: &self.attack,
        })
        .expect("config serializes");
        fnv1a64(&bytes)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}
