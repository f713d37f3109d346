//! Intervention-based leakage evaluation.
//!
//! Four numbers characterize a trained model on the test split:
//!
//! - `B`: plain accuracy with the model's own hard concept predictions.
//! - `C_pos`: accuracy with ground-truth concepts substituted in.
//! - `C_neg`: accuracy after replacing each row's concept signal with a
//!   random donor row's concepts. If the task head truly relies on the
//!   concept signal this collapses toward the label-agreement rate of
//!   random pairs; if it quietly routes around concepts it barely moves.
//! - `R_neg`: accuracy after replacing each row's *raw* residual with a
//!   random donor row's residual (re-whitened downstream where the model
//!   whitens). A residual that carries leaked task information drags
//!   accuracy down when scrambled; a clean residual leaves it intact.
//!
//! Donor rows come from the same test split via a seeded permutation, so
//! every replacement value is an in-distribution activation rather than
//! synthetic noise. Randomized probes are averaged over an explicit list
//! of permutation seeds; the seeds are independent, so the suite fans
//! them out through [`crate::par::map_jobs`].

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{EvalSource, Method, Model};
use crate::par::try_map_jobs;
use crate::rng::{permutation, stream_rng, Stream};
use crate::synth::{Dataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    ConceptGroundTruth,
    RandomConcept,
    RandomResidual,
}

impl InterventionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::ConceptGroundTruth => "concept_ground_truth",
            InterventionKind::RandomConcept => "random_concept",
            InterventionKind::RandomResidual => "random_residual",
        }
    }
}

/// Where random-concept donors come from. Ground truth keeps override
/// vectors in the exact {0, 1} distribution the task head trained on;
/// predicted-hard donors are available for probing the model's own
/// prediction distribution instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorConcepts {
    #[default]
    GroundTruth,
    PredictedHard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Permutation seeds for the randomized probes, one run per seed.
    pub seeds: Vec<u64>,
    pub donor: DonorConcepts,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: vec![0, 1, 2],
            donor: DonorConcepts::GroundTruth,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single value.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

pub fn summarize(vals: &[f64]) -> Summary {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        std,
        per_seed: vals.to_vec(),
    }
}

/// Flat, JSON-stable record of one suite run. `R_neg_*` fields are null
/// for bottleneck models, which have no residual to scramble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterventionReport {
    pub method: Method,
    pub residual_dim: usize,
    #[serde(rename = "seed")]
    pub seeds: Vec<u64>,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C_pos")]
    pub c_pos: f64,
    #[serde(rename = "C_neg_mean")]
    pub c_neg_mean: f64,
    #[serde(rename = "C_neg_std")]
    pub c_neg_std: f64,
    #[serde(rename = "C_neg_per_seed")]
    pub c_neg_per_seed: Vec<f64>,
    #[serde(rename = "R_neg_mean")]
    pub r_neg_mean: Option<f64>,
    #[serde(rename = "R_neg_std")]
    pub r_neg_std: Option<f64>,
    #[serde(rename = "R_neg_per_seed")]
    pub r_neg_per_seed: Option<Vec<f64>>,
}

/// Rejects intervention kinds the model cannot express.
pub fn check_plan(model: &Model, kind: InterventionKind) -> Result<()> {
    if kind == InterventionKind::RandomResidual && model.arch.residual_dim == 0 {
        return Err(CoreError::InvalidConfig(
            "random_residual intervention needs a residual head".into(),
        ));
    }
    Ok(())
}

/// Accuracy on the test split under one intervention with one seed.
pub fn run_intervention(
    model: &Model,
    ds: &Dataset,
    kind: InterventionKind,
    seed: u64,
    donor: DonorConcepts,
) -> Result<f64> {
    check_plan(model, kind)?;
    let (x, c, y) = ds.part(Split::Test)?;
    match kind {
        InterventionKind::ConceptGroundTruth => {
            model.accuracy_on(&x, &c, &y, EvalSource::GroundTruth, None, None)
        }
        InterventionKind::RandomConcept => {
            let mut rng = stream_rng(seed, Stream::Intervention);
            let perm = permutation(x.rows(), &mut rng);
            let pool = match donor {
                DonorConcepts::GroundTruth => c.clone(),
                DonorConcepts::PredictedHard => model.concept_hard(&x)?,
            };
            let donors = pool.gather_rows(&perm)?;
            model.accuracy_on(&x, &c, &y, EvalSource::PredictedHard, Some(&donors), None)
        }
        InterventionKind::RandomResidual => {
            let mut rng = stream_rng(seed, Stream::Intervention);
            let perm = permutation(x.rows(), &mut rng);
            let donors = model.residuals(&x)?.gather_rows(&perm)?;
            model.accuracy_on(&x, &c, &y, EvalSource::PredictedHard, None, Some(&donors))
        }
    }
}

/// The full four-number evaluation. `C_pos` needs no randomness and runs
/// once; the randomized probes run once per seed, in parallel when built
/// with the `parallel` feature. `R_neg` is absent for bottlenecks.
pub fn run_suite(model: &Model, ds: &Dataset, cfg: &SuiteConfig) -> Result<InterventionReport> {
    if cfg.seeds.is_empty() {
        return Err(CoreError::InvalidConfig(
            "intervention suite needs at least one seed".into(),
        ));
    }
    let b = model.split_accuracy(ds, Split::Test, EvalSource::PredictedHard)?;
    let c_pos = run_intervention(model, ds, InterventionKind::ConceptGroundTruth, 0, cfg.donor)?;

    let mut jobs: Vec<(InterventionKind, u64)> = cfg
        .seeds
        .iter()
        .map(|&s| (InterventionKind::RandomConcept, s))
        .collect();
    let with_residual = model.arch.residual_dim > 0;
    if with_residual {
        jobs.extend(cfg.seeds.iter().map(|&s| (InterventionKind::RandomResidual, s)));
    }
    let outcomes = try_map_jobs(jobs, 0, |(kind, s)| {
        run_intervention(model, ds, kind, s, cfg.donor)
    });
    let mut vals = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        vals.push(o?);
    }
    let c_neg = summarize(&vals[..cfg.seeds.len()]);
    let r_neg = with_residual.then(|| summarize(&vals[cfg.seeds.len()..]));

    let (r_neg_mean, r_neg_std, r_neg_per_seed) = match r_neg {
        Some(s) => (Some(s.mean), Some(s.std), Some(s.per_seed)),
        None => (None, None, None),
    };
    Ok(InterventionReport {
        method: model.method,
        residual_dim: model.arch.residual_dim,
        seeds: cfg.seeds.clone(),
        b,
        c_pos,
        c_neg_mean: c_neg.mean,
        c_neg_std: c_neg.std,
        c_neg_per_seed: c_neg.per_seed,
        r_neg_mean,
        r_neg_std,
        r_neg_per_seed,
    })
}
