//! The JSON surface: experiment configs, sweep grids, and config hashing.
//!
//! A config fully determines an experiment — every seed is written down, so
//! the same file always names the same run. The identity of a run is the
//! first 16 hex digits of the SHA-256 of its serialized config; records are
//! stored under that hash and a stored config must re-hash to the name of
//! the file it sits in.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crbm_core::adam::AdamConfig;
use crbm_core::club::ClubConfig;
use crbm_core::decorr::DecorrPolicy;
use crbm_core::error::{CoreError, Result};
use crbm_core::intervene::DonorConcepts;
use crbm_core::model::{Arch, ConceptMode, Method, TrainConfig};
use crbm_core::synth::{Dataset, TaskSpec};
use crbm_core::whiten::WhitenConfig;

/// Method-loss weight used when a config leaves `beta` null. The MI bound
/// fights the task gradient harder than the covariance penalty does, so it
/// gets a gentler default.
pub fn default_beta(method: Method) -> f64 {
    match method {
        Method::Mi => 0.1,
        _ => 1.0,
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_task_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_task_hidden")]
    pub task_hidden: Vec<usize>,
    pub residual_dim: usize,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_concept: f64,
    /// Null means the per-method default from [`default_beta`].
    pub beta: Option<f64>,
    pub decorr_policy: DecorrPolicy,
    pub iternorm_iterations: usize,
    pub club_hidden: Vec<usize>,
    pub club_lr: f64,
    pub club_updates_per_step: usize,
    pub eval_concept_mode: ConceptMode,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            epochs: base.epochs,
            batch: base.batch,
            lr: base.adam.lr,
            lambda_concept: base.lambda_concept,
            beta: None,
            decorr_policy: base.decorr_policy,
            iternorm_iterations: base.whiten.iterations,
            club_hidden: base.club.hidden.clone(),
            club_lr: base.club.lr,
            club_updates_per_step: base.club_updates_per_step,
            eval_concept_mode: base.eval_concept_mode,
            seed: base.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// One randomized-intervention run per seed; means and stds go in the
    /// record.
    pub intervention_seeds: Vec<u64>,
    pub posthoc_mi_epochs: usize,
    pub donor: DonorConcepts,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            intervention_seeds: vec![0, 1, 2],
            posthoc_mi_epochs: 5,
            donor: DonorConcepts::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        self.task
            .validate()
            .map_err(|e| CoreError::InvalidConfig(format!("task: {e}")))?;
        match (self.model.method, self.model.residual_dim) {
            (Method::Bottleneck, 0) => {}
            (Method::Bottleneck, m) => {
                return fail(format!(
                    "model.residual_dim: bottleneck requires 0, got {m}"
                ))
            }
            (method, 0) => {
                return fail(format!(
                    "model.residual_dim: method {} needs >= 1, got 0",
                    method.as_str()
                ))
            }
            _ => {}
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return fail("model.hidden: layer widths must be positive".into());
        }
        if self.model.task_hidden.iter().any(|&h| h == 0) {
            return fail("model.task_hidden: layer widths must be positive".into());
        }
        if self.eval.intervention_seeds.is_empty() {
            return fail("eval.intervention_seeds: need at least one seed".into());
        }
        if self.eval.posthoc_mi_epochs == 0 {
            return fail("eval.posthoc_mi_epochs: must be >= 1".into());
        }
        self.to_train_config()
            .validate()
            .map_err(|e| CoreError::InvalidConfig(format!("train: {e}")))?;
        Ok(())
    }

    pub fn resolved_beta(&self) -> f64 {
        self.train
            .beta
            .unwrap_or_else(|| default_beta(self.model.method))
    }

    pub fn to_train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            lambda_concept: t.lambda_concept,
            beta: self.resolved_beta(),
            decorr_policy: t.decorr_policy,
            whiten: WhitenConfig {
                iterations: t.iternorm_iterations,
                ..WhitenConfig::default()
            },
            club: ClubConfig {
                hidden: t.club_hidden.clone(),
                lr: t.club_lr,
                ..ClubConfig::default()
            },
            club_updates_per_step: t.club_updates_per_step,
            eval_concept_mode: t.eval_concept_mode,
            seed: t.seed,
        }
    }

    /// Architecture for a generated dataset: input and concept widths come
    /// from the data, the rest from the config.
    pub fn arch_for(&self, ds: &Dataset) -> Arch {
        Arch {
            input_dim: ds.input_dim(),
            hidden: self.model.hidden.clone(),
            concept_dim: ds.concept_dim(),
            residual_dim: self.model.residual_dim,
            task_hidden: self.model.task_hidden.clone(),
            n_classes: ds.n_classes,
        }
    }

    /// First 16 hex digits of the SHA-256 of the serialized config. Field
    /// order is fixed by the struct definitions, so equal configs hash
    /// equally and the hash recomputes from a stored record.
    pub fn hash(&self) -> Result<String> {
        let json =
            serde_json::to_string(self).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn default_grid_dims() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridModelSection {
    pub hidden: Option<Vec<usize>>,
    pub task_hidden: Option<Vec<usize>>,
}

/// A sweep is the cartesian grid methods x residual_dims x seeds x tasks,
/// with two carve-outs: bottleneck ignores the dims list and contributes one
/// m = 0 cell per task and seed, and m = 0 entries are skipped for every
/// other method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<Method>,
    #[serde(default = "default_grid_dims")]
    pub residual_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: GridModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl GridSpec {
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let fail = |msg: &str| Err(CoreError::InvalidConfig(msg.into()));
        if self.tasks.is_empty() {
            return fail("grid.tasks: empty");
        }
        if self.methods.is_empty() {
            return fail("grid.methods: empty");
        }
        if self.seeds.is_empty() {
            return fail("grid.seeds: empty");
        }
        let mut cells = Vec::new();
        for task in &self.tasks {
            for &seed in &self.seeds {
                for &method in &self.methods {
                    let dims: Vec<usize> = if method == Method::Bottleneck {
                        vec![0]
                    } else {
                        self.residual_dims.iter().copied().filter(|&m| m > 0).collect()
                    };
                    for m in dims {
                        cells.push(ExperimentConfig {
                            task: task.clone(),
                            model: ModelSection {
                                hidden: self.model.hidden.clone().unwrap_or_else(default_hidden),
                                task_hidden: self
                                    .model
                                    .task_hidden
                                    .clone()
                                    .unwrap_or_else(default_task_hidden),
                                residual_dim: m,
                                method,
                            },
                            train: TrainSection {
                                seed,
                                ..self.train.clone()
                            },
                            eval: self.eval.clone(),
                        });
                    }
                }
            }
        }
        if cells.is_empty() {
            return fail("grid expands to zero cells (no usable residual_dims?)");
        }
        for cell in &cells {
            cell.validate()?;
        }
        Ok(cells)
    }
}
