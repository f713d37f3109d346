//! Central finite-difference verification of every tape primitive and every
//! loss in the workbench.
//!
//! Each case rebuilds its graph from scratch per perturbed entry, so the
//! check exercises the same code path training uses. Unary ops are wrapped in
//! a weighted mean against a fixed random matrix so that a wrong backward
//! rule cannot hide behind a symmetric loss.

use rand::Rng;

use crate::club::{Club, ClubConfig};
use crate::decorr::{decorr_loss_tape, DecorrPolicy};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::tape::{Tape, Var};
use crate::whiten::{iternorm_train_tape, WhitenConfig, WhitenState};

pub const GRADCHECK_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.cases.iter().all(|c| c.max_rel_err <= tol)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares analytic gradients against central differences for one graph.
/// `build` must construct the same graph from the given input leaves each
/// time it is called.
pub fn check_gradient(
    name: &str,
    inputs: &[Matrix],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckCase> {
    let eval = |mats: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss)[(0, 0)])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned();
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let mut plus = inputs.to_vec();
                plus[i].set(r, c, input[(r, c)] + FD_STEP);
                let mut minus = inputs.to_vec();
                minus[i].set(r, c, input[(r, c)] - FD_STEP);
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                let a = analytic.as_ref().map_or(0.0, |g| g[(r, c)]);
                worst = worst.max(rel_err(a, numeric));
            }
        }
    }
    Ok(GradCheckCase {
        name: name.to_string(),
        max_rel_err: worst,
    })
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Uniform draw excluding a margin around the given points, for ops with
/// kinks (relu at 0, clamp at its bounds).
fn uniform_away_from(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    })
}

/// Runs the whole verification suite. Covers every primitive op and, as
/// composites, the decorrelation loss (both policies), the variational and
/// MI objectives of the CLUB estimator, train-mode whitening, and both fused
/// classification losses.
pub fn run_all(seed: u64) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let mut cases = Vec::new();

    // Weighted mean against a fixed matrix makes unary gradients asymmetric.
    let w34 = uniform(&mut rng, 3, 4, -1.0, 1.0);
    let weighted = |w: Matrix| {
        move |t: &mut Tape, v: Var| -> Result<Var> {
            let wc = t.constant(w.clone());
            let prod = t.mul(v, wc)?;
            t.reduce_mean(prod)
        }
    };

    {
        let a = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let b = uniform(&mut rng, 4, 2, -1.0, 1.0);
        cases.push(check_gradient("matmul", &[a, b], &|t, v| {
            let p = t.matmul(v[0], v[1])?;
            let s = t.square(p)?;
            t.reduce_mean(s)
        })?);
    }
    {
        let a = uniform(&mut rng, 3, 3, -1.0, 1.0);
        let b = uniform(&mut rng, 3, 3, -1.0, 1.0);
        cases.push(check_gradient("add", &[a.clone(), b.clone()], &|t, v| {
            let s = t.add(v[0], v[1])?;
            let q = t.square(s)?;
            t.reduce_mean(q)
        })?);
        cases.push(check_gradient("sub", &[a.clone(), b.clone()], &|t, v| {
            let s = t.sub(v[0], v[1])?;
            let q = t.square(s)?;
            t.reduce_mean(q)
        })?);
        cases.push(check_gradient("mul", &[a, b], &|t, v| {
            let s = t.mul(v[0], v[1])?;
            let q = t.square(s)?;
            t.reduce_mean(q)
        })?);
    }
    {
        let a = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let w = weighted(w34.clone());
        cases.push(check_gradient("mul_scalar", &[a], &move |t, v| {
            let s = t.mul_scalar(v[0], 1.7)?;
            w(t, s)
        })?);
    }
    {
        let a = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let s = uniform(&mut rng, 1, 1, 0.5, 1.5);
        let w = weighted(w34.clone());
        cases.push(check_gradient("scale_by", &[a, s], &move |t, v| {
            let out = t.scale_by(v[0], v[1])?;
            w(t, out)
        })?);
    }
    {
        let x = uniform(&mut rng, 4, 3, -1.0, 1.0);
        let row = uniform(&mut rng, 1, 3, -1.0, 1.0);
        cases.push(check_gradient("add_row_broadcast", &[x, row], &|t, v| {
            let out = t.add_row_broadcast(v[0], v[1])?;
            let q = t.square(out)?;
            t.reduce_mean(q)
        })?);
    }
    {
        let x = uniform_away_from(&mut rng, 3, 4, -1.0, 1.0, &[0.0], 0.05);
        let w = weighted(w34.clone());
        cases.push(check_gradient("relu", &[x], &move |t, v| {
            let out = t.relu(v[0])?;
            w(t, out)
        })?);
    }
    for (name, lo, hi) in [("sigmoid", -2.0, 2.0), ("exp", -1.0, 1.0), ("square", -1.0, 1.0)] {
        let x = uniform(&mut rng, 3, 4, lo, hi);
        let w = weighted(w34.clone());
        let case = check_gradient(name, &[x], &move |t, v| {
            let out = match name {
                "sigmoid" => t.sigmoid(v[0])?,
                "exp" => t.exp(v[0])?,
                _ => t.square(v[0])?,
            };
            w(t, out)
        })?;
        cases.push(case);
    }
    for name in ["sqrt", "recip"] {
        let x = uniform(&mut rng, 3, 4, 0.5, 2.0);
        let w = weighted(w34.clone());
        let case = check_gradient(name, &[x], &move |t, v| {
            let out = if name == "sqrt" { t.sqrt(v[0])? } else { t.recip(v[0])? };
            w(t, out)
        })?;
        cases.push(case);
    }
    {
        let x = uniform_away_from(&mut rng, 3, 4, -1.0, 1.0, &[-0.5, 0.5], 0.05);
        let w = weighted(w34.clone());
        cases.push(check_gradient("clamp", &[x], &move |t, v| {
            let out = t.clamp(v[0], -0.5, 0.5)?;
            w(t, out)
        })?);
    }
    {
        let x = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let w43 = uniform(&mut rng, 4, 3, -1.0, 1.0);
        cases.push(check_gradient("transpose", &[x], &move |t, v| {
            let out = t.transpose(v[0])?;
            let wc = t.constant(w43.clone());
            let prod = t.mul(out, wc)?;
            t.reduce_mean(prod)
        })?);
    }
    {
        let a = uniform(&mut rng, 3, 2, -1.0, 1.0);
        let b = uniform(&mut rng, 3, 3, -1.0, 1.0);
        let w35 = uniform(&mut rng, 3, 5, -1.0, 1.0);
        cases.push(check_gradient("concat_cols", &[a, b], &move |t, v| {
            let out = t.concat_cols(v[0], v[1])?;
            let wc = t.constant(w35.clone());
            let prod = t.mul(out, wc)?;
            t.reduce_mean(prod)
        })?);
    }
    {
        let x = uniform(&mut rng, 3, 5, -1.0, 1.0);
        let w33 = uniform(&mut rng, 3, 3, -1.0, 1.0);
        cases.push(check_gradient("slice_cols", &[x], &move |t, v| {
            let out = t.slice_cols(v[0], 1, 4)?;
            let wc = t.constant(w33.clone());
            let prod = t.mul(out, wc)?;
            t.reduce_mean(prod)
        })?);
    }
    {
        let x = uniform(&mut rng, 3, 4, -1.0, 1.0);
        cases.push(check_gradient("reduce_mean", &[x], &|t, v| t.reduce_mean(v[0]))?);
    }
    {
        let x = uniform(&mut rng, 4, 3, -1.0, 1.0);
        let idx = vec![2usize, 0, 2, 1, 3];
        let w53 = uniform(&mut rng, 5, 3, -1.0, 1.0);
        cases.push(check_gradient("gather_rows", &[x], &move |t, v| {
            let out = t.gather_rows(v[0], &idx)?;
            let wc = t.constant(w53.clone());
            let prod = t.mul(out, wc)?;
            t.reduce_mean(prod)
        })?);
    }
    {
        let logits = uniform(&mut rng, 4, 5, -2.0, 2.0);
        let labels = vec![0usize, 2, 4, 1];
        cases.push(check_gradient("softmax_cross_entropy", &[logits], &move |t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        })?);
    }
    {
        let logits = uniform(&mut rng, 3, 4, -2.0, 2.0);
        let targets = Matrix::from_fn(3, 4, |i, j| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        cases.push(check_gradient("bce_with_logits", &[logits], &move |t, v| {
            let tv = t.constant(targets.clone());
            t.bce_with_logits(v[0], tv)
        })?);
    }
    {
        let soft = uniform(&mut rng, 3, 4, 0.1, 0.9);
        let logits = uniform(&mut rng, 3, 4, -2.0, 2.0);
        cases.push(check_gradient("bce_with_logits_soft_targets", &[logits], &move |t, v| {
            let tv = t.constant(soft.clone());
            t.bce_with_logits(v[0], tv)
        })?);
    }

    {
        let c = uniform(&mut rng, 6, 3, -1.0, 1.0);
        let r = uniform(&mut rng, 6, 4, -1.0, 1.0);
        for (name, policy) in [
            ("decorr_cross_block", DecorrPolicy::CrossBlock),
            ("decorr_literal_offdiag", DecorrPolicy::LiteralOffdiag),
        ] {
            cases.push(check_gradient(name, &[c.clone(), r.clone()], &move |t, v| {
                decorr_loss_tape(t, v[0], v[1], policy)
            })?);
        }
    }

    {
        // Columns on distinct scales with independent draws keep the
        // covariance well conditioned, so the detached convergence guard
        // stays at exactly 1 and finite differences see a smooth function.
        let scales = [1.0, 1.3, 0.8];
        let x = Matrix::from_fn(24, 3, |_, j| scales[j] * rng.gen_range(-1.0..1.0f64));
        let sigma = crate::whiten::sample_covariance(&x)?;
        assert_eq!(crate::whiten::guard_factor(&sigma), 1.0);
        let w243 = uniform(&mut rng, 24, 3, -1.0, 1.0);
        cases.push(check_gradient("iternorm_whiten", &[x], &move |t, v| {
            let mut state = WhitenState::new(3, WhitenConfig { iterations: 3, ..Default::default() });
            let out = iternorm_train_tape(t, v[0], &mut state)?;
            let wc = t.constant(w243.clone());
            let prod = t.mul(out, wc)?;
            t.reduce_mean(prod)
        })?);
    }

    {
        let mut club_rng = stream_rng(seed ^ 0xc1ab, Stream::ModelInit);
        let club = Club::new(2, 2, ClubConfig { hidden: vec![4], ..Default::default() }, &mut club_rng)?;
        let mut inputs = club.params.clone();
        let c = uniform(&mut rng, 5, 2, -1.0, 1.0);
        let r = uniform(&mut rng, 5, 2, -1.0, 1.0);
        inputs.push(c);
        inputs.push(r);
        let n_params = club.params.len();
        let club_v = club.clone();
        cases.push(check_gradient("club_variational", &inputs, &move |t, v| {
            club_v.variational_loss_tape(t, &v[..n_params], v[n_params], v[n_params + 1])
        })?);
        let perm = vec![3usize, 0, 4, 1, 2];
        let club_m = club.clone();
        cases.push(check_gradient("club_mi", &inputs, &move |t, v| {
            club_m.mi_tape(t, &v[..n_params], v[n_params], v[n_params + 1], &perm)
        })?);
    }

    Ok(GradCheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_is_within_tolerance() {
        let report = run_all(0).unwrap();
        assert!(report.cases.len() >= 24, "only {} cases", report.cases.len());
        for case in &report.cases {
            assert!(
                case.max_rel_err <= GRADCHECK_TOL,
                "{} rel err {:.3e} exceeds {:.0e}",
                case.name,
                case.max_rel_err,
                GRADCHECK_TOL
            );
        }
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        // Sanity: a deliberately skewed loss (analytic path sees only half
        // the input contribution via stop_gradient) must not pass.
        let x = Matrix::filled(2, 2, 0.7);
        let case = check_gradient("deliberate_mismatch", &[x], &|t, v| {
            let frozen = t.stop_gradient(v[0]);
            let prod = t.mul(v[0], frozen)?;
            t.reduce_mean(prod)
        })
        .unwrap();
        assert!(case.max_rel_err > 0.1, "rel err {}", case.max_rel_err);
    }

    #[test]
    fn stop_gradient_blocks_exactly_in_suite_context() {
        let x = Matrix::filled(3, 3, 0.5);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.stop_gradient(v);
        let q = tape.square(s).unwrap();
        let loss = tape.reduce_mean(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(v).is_none());
    }
}
