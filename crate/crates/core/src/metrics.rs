//! Post-hoc disentanglement metrics and their relation to intervenability.
//!
//! Two scalar probes of a trained model's concept/residual split:
//!
//! - cross-correlation: mean absolute Pearson correlation between concept
//!   columns and raw residual columns. Cheap, but blind to any nonlinear
//!   dependence.
//! - variational MI: a fresh contrastive bound fitted from scratch on the
//!   training split and read out on the test split. Slower, but sensitive
//!   to exactly the leakage interventions expose.
//!
//! Both probes look at the concept signal the task head actually consumes
//! at eval time — the model's own hard predictions — not the ground-truth
//! labels.
//!
//! `metric_table` then asks the question the probes exist for: across a
//! sweep of models at one residual width, how well does each metric predict
//! ground-truth-concept intervenability (`c_pos`)? One simple regression per
//! metric, R-squared per row.

use serde::{Deserialize, Serialize};

use crate::club::{Club, ClubConfig};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::rng::{permutation, stream_rng, Stream};
use crate::synth::{Dataset, Split};

/// Mean over all concept x residual column pairs of the absolute Pearson
/// correlation, so the score lands in [0, 1] whatever the widths. Pairs
/// involving a zero-variance column contribute 0. No pairs (k or m zero)
/// scores 0 by convention.
pub fn cross_correlation_metric(c: &Matrix, r: &Matrix) -> Result<f64> {
    if c.rows() != r.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "cross_correlation",
            detail: format!("{} vs {} rows", c.rows(), r.rows()),
        });
    }
    if c.rows() < 3 {
        return Err(CoreError::InvalidConfig(
            "correlation needs at least 3 rows".into(),
        ));
    }
    let pairs = c.cols() * r.cols();
    if pairs == 0 {
        return Ok(0.0);
    }
    let n = c.rows() as f64;
    let center = |m: &Matrix| {
        let means = m.col_means();
        let mut out = m.clone();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(i, j, m[(i, j)] - means[(0, j)]);
            }
        }
        out
    };
    let cc = center(c);
    let rc = center(r);
    let sd = |m: &Matrix, j: usize| {
        let mut s = 0.0;
        for i in 0..m.rows() {
            s += m[(i, j)] * m[(i, j)];
        }
        (s / n).sqrt()
    };
    let mut total = 0.0;
    for a in 0..c.cols() {
        let sa = sd(&cc, a);
        if sa == 0.0 {
            continue;
        }
        for b in 0..r.cols() {
            let sb = sd(&rc, b);
            if sb == 0.0 {
                continue;
            }
            let mut cov = 0.0;
            for i in 0..c.rows() {
                cov += cc[(i, a)] * rc[(i, b)];
            }
            cov /= n;
            total += (cov / (sa * sb)).abs();
        }
    }
    Ok(total / pairs as f64)
}

/// Cross-correlation between the model's hard concept predictions and its
/// raw residuals on the test split.
pub fn cross_correlation_on(model: &Model, ds: &Dataset) -> Result<f64> {
    let (x, _, _) = ds.part(Split::Test)?;
    if model.arch.residual_dim == 0 {
        return Ok(0.0);
    }
    let c = model.concept_hard(&x)?;
    let r = model.residuals(&x)?;
    cross_correlation_metric(&c, &r)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiProbeConfig {
    pub club: ClubConfig,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for MiProbeConfig {
    fn default() -> Self {
        MiProbeConfig {
            club: ClubConfig::default(),
            epochs: 5,
            batch: 128,
        }
    }
}

/// Variational MI between hard concept predictions and raw residuals with
/// the default probe shape; see [`posthoc_mi_with`].
pub fn posthoc_mi(model: &Model, ds: &Dataset, epochs: usize, seed: u64) -> Result<f64> {
    posthoc_mi_with(model, ds, &MiProbeConfig { epochs, ..Default::default() }, seed)
}

/// Fits a fresh variational estimator to (hard concept predictions,
/// residuals) pairs from the training split, then reads the MI bound out
/// over the test split, one fixed donor permutation per batch, weighted by
/// batch size. Bottlenecks have no residual and score 0 by definition.
pub fn posthoc_mi_with(
    model: &Model,
    ds: &Dataset,
    probe: &MiProbeConfig,
    seed: u64,
) -> Result<f64> {
    if model.arch.residual_dim == 0 {
        return Ok(0.0);
    }
    let mut rng = stream_rng(seed, Stream::Metrics);
    let (x_tr, _, _) = ds.part(Split::Train)?;
    let c_tr = model.concept_hard(&x_tr)?;
    let r_tr = model.residuals(&x_tr)?;
    let mut club = Club::new(
        model.arch.concept_dim,
        model.arch.residual_dim,
        probe.club.clone(),
        &mut rng,
    )?;
    club.fit(&c_tr, &r_tr, probe.epochs, probe.batch, &mut rng)?;

    let (x_te, _, _) = ds.part(Split::Test)?;
    if x_te.rows() == 0 {
        return Err(CoreError::InvalidConfig("empty test split".into()));
    }
    let c_te = model.concept_hard(&x_te)?;
    let r_te = model.residuals(&x_te)?;
    let n = x_te.rows();
    let mut acc = 0.0;
    for chunk_start in (0..n).step_by(probe.batch) {
        let hi = (chunk_start + probe.batch).min(n);
        let idx: Vec<usize> = (chunk_start..hi).collect();
        let cb = c_te.gather_rows(&idx)?;
        let rb = r_te.gather_rows(&idx)?;
        let perm = permutation(idx.len(), &mut rng);
        acc += club.mi_estimate(&cb, &rb, &perm)? * idx.len() as f64;
    }
    Ok(acc / n as f64)
}

/// R-squared of a simple least-squares line through (x, y). Degenerate
/// targets (zero variance) score 0, as does a fit no better than the mean.
/// Fewer than two points cannot be regressed.
pub fn r2_regression(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(CoreError::ShapeMismatch {
            op: "r2_regression",
            detail: format!("{} xs vs {} ys", xs.len(), ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(CoreError::InvalidConfig(
            "regression needs at least 2 points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 {
        return Ok(0.0);
    }
    let ss_res = if sxx == 0.0 {
        syy
    } else {
        syy - sxy * sxy / sxx
    };
    Ok((1.0 - ss_res / syy).clamp(0.0, 1.0))
}

/// One sweep cell's contribution to the metric table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub residual_dim: usize,
    pub c_pos: f64,
    pub cc: f64,
    pub mi: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub residual_dim: usize,
    pub n_points: usize,
    pub r2_cc: f64,
    pub r2_mi: f64,
}

/// Groups points by residual width and regresses `c_pos` on each metric.
/// Widths with fewer than two points, or whose points are all identical,
/// cannot be regressed; they are skipped with a warning.
pub fn metric_table(points: &[MetricPoint]) -> Vec<MetricRow> {
    let mut dims: Vec<usize> = points.iter().map(|p| p.residual_dim).collect();
    dims.sort_unstable();
    dims.dedup();
    let mut rows = Vec::new();
    for dim in dims {
        let group: Vec<&MetricPoint> = points.iter().filter(|p| p.residual_dim == dim).collect();
        if group.len() < 2 {
            log::warn!("metric table: skipping residual_dim {dim} (singleton group)");
            continue;
        }
        if group.iter().all(|p| **p == *group[0]) {
            log::warn!("metric table: skipping residual_dim {dim} (identical records)");
            continue;
        }
        let c_pos: Vec<f64> = group.iter().map(|p| p.c_pos).collect();
        let cc: Vec<f64> = group.iter().map(|p| p.cc).collect();
        let mi: Vec<f64> = group.iter().map(|p| p.mi).collect();
        rows.push(MetricRow {
            residual_dim: dim,
            n_points: group.len(),
            r2_cc: r2_regression(&cc, &c_pos).expect("group size checked"),
            r2_mi: r2_regression(&mi, &c_pos).expect("group size checked"),
        });
    }
    rows
}
