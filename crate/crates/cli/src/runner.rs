//! One experiment cell: data, training, probes, and a JSON record on disk.
//!
//! Records are append-only. A record lives at `<results-dir>/<hash>.json`
//! where the hash names the config; reruns of a hash that already has a
//! record are skipped unless forced, which is what makes interrupted sweeps
//! resumable. Writes go through a temp file and a rename so a crashed or
//! concurrent run can never leave a half-written record behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crbm_core::error::{CoreError, Result};
use crbm_core::intervene::{run_suite, SuiteConfig};
use crbm_core::metrics::{cross_correlation_on, posthoc_mi};
use crbm_core::model::{train, Method, Model};
use crbm_core::par::try_map_jobs;
use crbm_core::synth::generate;

use crate::config::{ExperimentConfig, GridSpec};

/// Everything one run leaves behind, flat enough to drop into a CSV row.
/// `R_neg` fields are null for bottleneck models (no residual to scramble);
/// the embedded config re-hashes to `config_hash`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub task: String,
    pub method: Method,
    pub residual_dim: usize,
    pub seed: u64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C_pos")]
    pub c_pos: f64,
    #[serde(rename = "C_neg")]
    pub c_neg: f64,
    #[serde(rename = "C_neg_std")]
    pub c_neg_std: f64,
    #[serde(rename = "R_neg")]
    pub r_neg: Option<f64>,
    #[serde(rename = "R_neg_std")]
    pub r_neg_std: Option<f64>,
    pub cc_metric: f64,
    pub mi_metric: f64,
    pub wall_time_s: f64,
    pub config: ExperimentConfig,
}

impl ResultRecord {
    /// Accuracies are probabilities; a record violating that is corrupt.
    pub fn validate(&self) -> Result<()> {
        let mut fields = vec![("B", self.b), ("C_pos", self.c_pos), ("C_neg", self.c_neg)];
        if let Some(r) = self.r_neg {
            fields.push(("R_neg", r));
        }
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Checkpoint(format!(
                    "record {}: accuracy {name} = {v} outside [0, 1]",
                    self.config_hash
                )));
            }
        }
        let rehash = self.config.hash()?;
        if rehash != self.config_hash {
            return Err(CoreError::Checkpoint(format!(
                "record claims hash {} but its config hashes to {rehash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: ResultRecord,
    pub path: PathBuf,
    /// True when an existing record satisfied the run without training.
    pub skipped: bool,
}

pub fn record_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.json"))
}

pub fn read_record(path: &Path) -> Result<ResultRecord> {
    let text =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let record: ResultRecord = serde_json::from_str(&text).map_err(|e| {
        CoreError::Checkpoint(format!("unreadable record {}: {e}", path.display()))
    })?;
    record.validate()?;
    Ok(record)
}

fn write_record_atomic(path: &Path, record: &ResultRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record)
        .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, text).map_err(|e| CoreError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Generate -> train -> intervention suite -> metrics -> one record.
/// Idempotent per config hash: an existing record short-circuits the run
/// unless `force` is set.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let path = record_path(dir, &hash);
    if !force && path.exists() {
        let record = read_record(&path)?;
        return Ok(RunOutcome {
            record,
            path,
            skipped: true,
        });
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;

    let started = Instant::now();
    let ds = generate(&cfg.task)?;
    let tc = cfg.to_train_config();
    let mut model = Model::new(cfg.arch_for(&ds), cfg.model.method, &tc)?;
    train(&mut model, &ds, &tc)?;

    let suite = run_suite(
        &model,
        &ds,
        &SuiteConfig {
            seeds: cfg.eval.intervention_seeds.clone(),
            donor: cfg.eval.donor,
        },
    )?;
    let cc_metric = cross_correlation_on(&model, &ds)?;
    let mi_metric = posthoc_mi(&model, &ds, cfg.eval.posthoc_mi_epochs, tc.seed)?;

    let record = ResultRecord {
        config_hash: hash,
        task: cfg.task.label(),
        method: cfg.model.method,
        residual_dim: cfg.model.residual_dim,
        seed: cfg.train.seed,
        b: suite.b,
        c_pos: suite.c_pos,
        c_neg: suite.c_neg_mean,
        c_neg_std: suite.c_neg_std,
        r_neg: suite.r_neg_mean,
        r_neg_std: suite.r_neg_std,
        cc_metric,
        mi_metric,
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    record.validate()?;
    write_record_atomic(&path, &record)?;
    Ok(RunOutcome {
        record,
        path,
        skipped: false,
    })
}

/// One sweep cell's fate; failures stay in their cell instead of aborting
/// the sweep.
#[derive(Debug)]
pub struct CellOutcome {
    pub label: String,
    pub outcome: Result<RunOutcome>,
}

#[derive(Debug, Default)]
pub struct SweepSummary {
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn cell_label(cfg: &ExperimentConfig) -> String {
    format!(
        "{} {} m={} seed={}",
        cfg.task.label(),
        cfg.model.method.as_str(),
        cfg.model.residual_dim,
        cfg.train.seed
    )
}

/// Expands the grid and runs every cell, `jobs` at a time (0 = all cores).
/// Invalid grids fail before anything runs; per-cell runtime failures are
/// logged and counted, never fatal.
pub fn sweep(grid: &GridSpec, dir: &Path, jobs: usize, force: bool) -> Result<Vec<CellOutcome>> {
    let cells = grid.cells()?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let outcomes = try_map_jobs(cells.clone(), jobs, |cfg| run_experiment(&cfg, dir, force));
    Ok(cells
        .iter()
        .zip(outcomes)
        .map(|(cfg, outcome)| CellOutcome {
            label: cell_label(cfg),
            outcome,
        })
        .collect())
}

pub fn summarize_cells(outcomes: &[CellOutcome]) -> SweepSummary {
    let mut summary = SweepSummary::default();
    for cell in outcomes {
        match &cell.outcome {
            Ok(o) if o.skipped => summary.skipped += 1,
            Ok(_) => summary.ran += 1,
            Err(e) => {
                summary.failed += 1;
                log::error!("cell {} failed: {e}", cell.label);
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EvalSection, GridModelSection, ModelSection, TrainSection};
    use crbm_core::synth::TaskSpec;

    fn quick_config(method: Method, m: usize, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec {
                n_train: 300,
                n_val: 80,
                n_test: 200,
                d: 10,
                seed: 5,
                ..TaskSpec::complete(3, 4)
            },
            model: ModelSection {
                hidden: vec![16],
                task_hidden: vec![8],
                residual_dim: m,
                method,
            },
            train: TrainSection {
                epochs: 2,
                batch: 64,
                club_hidden: vec![8],
                seed,
                ..TrainSection::default()
            },
            eval: EvalSection {
                intervention_seeds: vec![0, 1],
                posthoc_mi_epochs: 2,
                ..EvalSection::default()
            },
        }
    }

    #[test]
    fn run_writes_a_record_then_skips_the_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Method::Latent, 4, 0);
        let first = run_experiment(&cfg, dir.path(), false).unwrap();
        assert!(!first.skipped);
        assert!(first.path.exists());
        assert!(first.record.r_neg.is_some());

        let second = run_experiment(&cfg, dir.path(), false).unwrap();
        assert!(second.skipped);
        assert_eq!(second.record.b, first.record.b);
        assert_eq!(second.record.c_pos, first.record.c_pos);

        let forced = run_experiment(&cfg, dir.path(), true).unwrap();
        assert!(!forced.skipped);
        assert_eq!(forced.record.b, first.record.b);
        assert_eq!(forced.record.c_neg, first.record.c_neg);
        assert_eq!(forced.record.mi_metric, first.record.mi_metric);
    }

    #[test]
    fn bottleneck_record_leaves_residual_fields_null() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Method::Bottleneck, 0, 0);
        let out = run_experiment(&cfg, dir.path(), false).unwrap();
        assert!(out.record.r_neg.is_none());
        assert!(out.record.r_neg_std.is_none());
        assert_eq!(out.record.cc_metric, 0.0);
        assert_eq!(out.record.mi_metric, 0.0);
        let text = std::fs::read_to_string(&out.path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["R_neg"].is_null());
        assert!(value["B"].is_number());
    }

    #[test]
    fn stored_record_rehashes_to_its_file_name() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Method::Latent, 4, 1);
        let out = run_experiment(&cfg, dir.path(), false).unwrap();
        let record = read_record(&out.path).unwrap();
        let stem = out.path.file_stem().unwrap().to_str().unwrap();
        assert_eq!(record.config.hash().unwrap(), stem);
    }

    #[test]
    fn tampered_records_are_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(Method::Latent, 4, 2);
        let out = run_experiment(&cfg, dir.path(), false).unwrap();
        let text = std::fs::read_to_string(&out.path).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["B"] = serde_json::json!(1.7);
        std::fs::write(&out.path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(read_record(&out.path).is_err());
    }

    #[test]
    fn sweep_runs_all_cells_and_resumes_where_it_stopped() {
        let dir = tempfile::tempdir().unwrap();
        let base = quick_config(Method::Latent, 4, 0);
        let grid = GridSpec {
            tasks: vec![base.task.clone()],
            methods: vec![Method::Bottleneck, Method::Latent],
            residual_dims: vec![4],
            seeds: vec![0, 1],
            model: GridModelSection {
                hidden: Some(base.model.hidden.clone()),
                task_hidden: Some(base.model.task_hidden.clone()),
            },
            train: base.train.clone(),
            eval: base.eval.clone(),
        };
        let outcomes = sweep(&grid, dir.path(), 1, false).unwrap();
        assert_eq!(outcomes.len(), 4);
        let summary = summarize_cells(&outcomes);
        assert_eq!((summary.ran, summary.skipped, summary.failed), (4, 0, 0));

        // Drop one record; a re-invocation redoes only that cell.
        let victim = outcomes[2].outcome.as_ref().unwrap().path.clone();
        std::fs::remove_file(&victim).unwrap();
        let again = sweep(&grid, dir.path(), 1, false).unwrap();
        let summary = summarize_cells(&again);
        assert_eq!((summary.ran, summary.skipped, summary.failed), (1, 3, 0));
    }
}
