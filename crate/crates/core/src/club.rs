//! CLUB-style mutual information upper bound between concepts and residuals.
//!
//! A small MLP `q(r | c)` predicts a diagonal Gaussian over residuals from
//! the concept signal. The variational network is trained by maximum
//! likelihood (its own optimizer, separate from the model). The MI estimate
//! is the contrastive gap
//!
//! ```text
//! mean_i log q(r_i | c_i) - mean_i log q(r_perm(i) | c_i)
//! ```
//!
//! with one uniform permutation per batch. During model training the
//! estimator parameters enter the graph as constants, so the estimate is
//! differentiable w.r.t. the residual batch but never trains q itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::rng::permutation;
use crate::tape::{Tape, Var};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClubConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub logvar_clamp: f64,
}

impl Default for ClubConfig {
    fn default() -> Self {
        ClubConfig {
            hidden: vec![64],
            lr: 1e-3,
            logvar_clamp: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Club {
    pub concept_dim: usize,
    pub residual_dim: usize,
    pub cfg: ClubConfig,
    pub params: Vec<Matrix>,
    adam: AdamState,
}

impl Club {
    pub fn new(concept_dim: usize, residual_dim: usize, cfg: ClubConfig, rng: &mut impl Rng) -> Result<Club> {
        if concept_dim == 0 || residual_dim == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "club needs positive dims, got concept {concept_dim}, residual {residual_dim}"
            )));
        }
        let mut params = Vec::new();
        let mut prev = concept_dim;
        for &h in cfg.hidden.iter().chain(std::iter::once(&(2 * residual_dim))) {
            let bound = 1.0 / (prev as f64).sqrt();
            params.push(Matrix::from_fn(prev, h, |_, _| rng.gen_range(-bound..bound)));
            params.push(Matrix::zeros(1, h));
            prev = h;
        }
        let adam = AdamState::new(&params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Ok(Club {
            concept_dim,
            residual_dim,
            cfg,
            params,
            adam,
        })
    }

    /// Puts the estimator parameters on a tape, trainable or frozen.
    pub fn insert_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// MLP head mapping concepts to (mu, logvar), logvar clamped.
    pub fn head_tape(&self, tape: &mut Tape, vars: &[Var], c: Var) -> Result<(Var, Var)> {
        let mut x = c;
        let n_layers = vars.len() / 2;
        for l in 0..n_layers {
            let z = tape.matmul(x, vars[2 * l])?;
            let z = tape.add_row_broadcast(z, vars[2 * l + 1])?;
            x = if l + 1 < n_layers { tape.relu(z)? } else { z };
        }
        let m = self.residual_dim;
        let mu = tape.slice_cols(x, 0, m)?;
        let logvar_raw = tape.slice_cols(x, m, 2 * m)?;
        let logvar = tape.clamp(logvar_raw, -self.cfg.logvar_clamp, self.cfg.logvar_clamp)?;
        Ok((mu, logvar))
    }

    /// Per-sample negative log density, a b x 1 column:
    /// 0.5 * sum_j ((r - mu)^2 exp(-s) + s + ln 2 pi).
    fn neg_ll_rows(&self, tape: &mut Tape, mu: Var, logvar: Var, r: Var) -> Result<Var> {
        let (b, m) = tape.value(r).shape();
        let diff = tape.sub(r, mu)?;
        let d2 = tape.square(diff)?;
        let neg_s = tape.mul_scalar(logvar, -1.0)?;
        let inv_var = tape.exp(neg_s)?;
        let quad = tape.mul(d2, inv_var)?;
        let with_s = tape.add(quad, logvar)?;
        let ln2pi = tape.constant(Matrix::filled(b, m, LN_2PI));
        let inner = tape.add(with_s, ln2pi)?;
        let ones = tape.constant(Matrix::filled(m, 1, 1.0));
        let row_sums = tape.matmul(inner, ones)?;
        tape.mul_scalar(row_sums, 0.5)
    }

    /// Mean negative log likelihood of the batch under q; the training loss
    /// for the estimator.
    pub fn variational_loss_tape(&self, tape: &mut Tape, vars: &[Var], c: Var, r: Var) -> Result<Var> {
        let (mu, logvar) = self.head_tape(tape, vars, c)?;
        let nll = self.neg_ll_rows(tape, mu, logvar, r)?;
        tape.reduce_mean(nll)
    }

    /// Contrastive MI estimate as a 1x1 node. Exactly zero for the identity
    /// permutation since both terms reuse the same values.
    pub fn mi_tape(&self, tape: &mut Tape, vars: &[Var], c: Var, r: Var, perm: &[usize]) -> Result<Var> {
        let b = tape.value(r).rows();
        if perm.len() != b {
            return Err(CoreError::ShapeMismatch {
                op: "club_mi",
                detail: format!("permutation of {} for batch {}", perm.len(), b),
            });
        }
        let (mu, logvar) = self.head_tape(tape, vars, c)?;
        let nll_pos = self.neg_ll_rows(tape, mu, logvar, r)?;
        let r_perm = tape.gather_rows(r, perm)?;
        let nll_neg = self.neg_ll_rows(tape, mu, logvar, r_perm)?;
        let mean_pos = tape.reduce_mean(nll_pos)?;
        let mean_neg = tape.reduce_mean(nll_neg)?;
        tape.sub(mean_neg, mean_pos)
    }

    /// One maximum-likelihood Adam step on the estimator. Returns the loss.
    pub fn update(&mut self, c: &Matrix, r: &Matrix) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape, true);
        let cv = tape.constant(c.clone());
        let rv = tape.constant(r.clone());
        let loss = self.variational_loss_tape(&mut tape, &vars, cv, rv)?;
        let loss_val = tape.value(loss)[(0, 0)];
        let mut grads = tape.backward(loss)?;
        let grad_list: Vec<Option<Matrix>> = vars.iter().map(|&v| grads.take(v)).collect();
        self.adam.step(&mut self.params, &grad_list)?;
        Ok(loss_val)
    }

    /// Value-level MI estimate with a given permutation.
    pub fn mi_estimate(&self, c: &Matrix, r: &Matrix, perm: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape, false);
        let cv = tape.constant(c.clone());
        let rv = tape.constant(r.clone());
        let mi = self.mi_tape(&mut tape, &vars, cv, rv, perm)?;
        Ok(tape.value(mi)[(0, 0)])
    }

    /// MI estimate averaged over several independent permutations.
    pub fn mi_estimate_avg(&self, c: &Matrix, r: &Matrix, n_perms: usize, rng: &mut impl Rng) -> Result<f64> {
        let b = r.rows();
        let mut total = 0.0;
        for _ in 0..n_perms.max(1) {
            let perm = permutation(b, rng);
            total += self.mi_estimate(c, r, &perm)?;
        }
        Ok(total / n_perms.max(1) as f64)
    }

    /// Epochs of minibatch maximum likelihood over a (c, r) table.
    pub fn fit(&mut self, c: &Matrix, r: &Matrix, epochs: usize, batch: usize, rng: &mut impl Rng) -> Result<f64> {
        if c.rows() != r.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "club_fit",
                detail: format!("{} concept rows vs {} residual rows", c.rows(), r.rows()),
            });
        }
        let n = c.rows();
        let batch = batch.max(2).min(n);
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let order = permutation(n, rng);
            for chunk in order.chunks(batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let cb = c.gather_rows(chunk)?;
                let rb = r.gather_rows(chunk)?;
                last = self.update(&cb, &rb)?;
            }
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn correlated_pairs(n: usize, rho: f64, seed: u64) -> (Matrix, Matrix) {
        let mut rng = stream_rng(seed, Stream::Metrics);
        let mut c = Matrix::zeros(n, 1);
        let mut r = Matrix::zeros(n, 1);
        for i in 0..n {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            c.set(i, 0, z1);
            r.set(i, 0, rho * z1 + (1.0 - rho * rho).sqrt() * z2);
        }
        (c, r)
    }

    #[test]
    fn identity_permutation_gives_exactly_zero() {
        let mut rng = stream_rng(1, Stream::ModelInit);
        let club = Club::new(3, 2, ClubConfig::default(), &mut rng).unwrap();
        let (c, _) = correlated_pairs(16, 0.0, 2);
        let c3 = c.concat_cols(&c).unwrap().concat_cols(&c).unwrap();
        let r = Matrix::from_fn(16, 2, |i, j| (i * 2 + j) as f64 * 0.1);
        let ident: Vec<usize> = (0..16).collect();
        let mi = club.mi_estimate(&c3, &r, &ident).unwrap();
        assert_eq!(mi, 0.0);
    }

    #[test]
    fn variational_loss_at_standard_normal_point() {
        // mu = 0, logvar = 0, r = 0: nll = m/2 * ln 2 pi per sample.
        let mut rng = stream_rng(3, Stream::ModelInit);
        let mut club = Club::new(2, 2, ClubConfig { hidden: vec![], ..Default::default() }, &mut rng).unwrap();
        for p in &mut club.params {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        let c = Matrix::zeros(4, 2);
        let r = Matrix::zeros(4, 2);
        let mut tape = Tape::new();
        let vars = club.insert_params(&mut tape, false);
        let cv = tape.constant(c);
        let rv = tape.constant(r);
        let loss = club.variational_loss_tape(&mut tape, &vars, cv, rv).unwrap();
        let expect = LN_2PI;
        assert!((tape.value(loss)[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn variational_loss_unit_error_point() {
        // mu = 0, logvar = 0, r = 1: nll = (1 + ln 2 pi) / 2 per sample.
        let mut rng = stream_rng(3, Stream::ModelInit);
        let mut club = Club::new(1, 1, ClubConfig { hidden: vec![], ..Default::default() }, &mut rng).unwrap();
        for p in &mut club.params {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        let c = Matrix::zeros(3, 1);
        let r = Matrix::filled(3, 1, 1.0);
        let mut tape = Tape::new();
        let vars = club.insert_params(&mut tape, false);
        let cv = tape.constant(c);
        let rv = tape.constant(r);
        let loss = club.variational_loss_tape(&mut tape, &vars, cv, rv).unwrap();
        let expect = 0.5 * (1.0 + LN_2PI);
        assert!((tape.value(loss)[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_leaves_the_loss_unchanged() {
        let mut rng = stream_rng(21, Stream::ModelInit);
        let club = Club::new(2, 2, ClubConfig { hidden: vec![8], ..Default::default() }, &mut rng).unwrap();
        let (c1, r1) = correlated_pairs(16, 0.5, 22);
        let c = c1.concat_cols(&c1).unwrap();
        let r = r1.concat_cols(&r1).unwrap();
        let eval = |cm: &Matrix, rm: &Matrix| {
            let mut tape = Tape::new();
            let vars = club.insert_params(&mut tape, false);
            let cv = tape.constant(cm.clone());
            let rv = tape.constant(rm.clone());
            let loss = club.variational_loss_tape(&mut tape, &vars, cv, rv).unwrap();
            tape.value(loss)[(0, 0)]
        };
        let twice: Vec<usize> = (0..16).chain(0..16).collect();
        let single = eval(&c, &r);
        let doubled = eval(&c.gather_rows(&twice).unwrap(), &r.gather_rows(&twice).unwrap());
        assert!((single - doubled).abs() < 1e-12, "{single} vs {doubled}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut rng = stream_rng(23, Stream::ModelInit);
        let mut club = Club::new(2, 1, ClubConfig { lr: 0.0, hidden: vec![4], ..Default::default() }, &mut rng).unwrap();
        let before = club.params.clone();
        let (c, r) = correlated_pairs(32, 0.3, 24);
        let c2 = c.concat_cols(&c).unwrap();
        club.update(&c2, &r).unwrap();
        for (a, b) in before.iter().zip(&club.params) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stationary_point_mass_leaves_parameters_unchanged() {
        // All-zero weights with a mu bias equal to the (constant) residual
        // and a logvar bias pushed past the clamp: every gradient vanishes
        // exactly, so an update is a no-op even at a positive learning rate.
        let mut rng = stream_rng(25, Stream::ModelInit);
        let mut club = Club::new(1, 1, ClubConfig { hidden: vec![4], ..Default::default() }, &mut rng).unwrap();
        for p in &mut club.params {
            *p = Matrix::zeros(p.rows(), p.cols());
        }
        let last = club.params.len() - 1;
        club.params[last].set(0, 0, 0.7);
        club.params[last].set(0, 1, -11.0);
        let c = Matrix::filled(5, 1, 0.3);
        let r = Matrix::filled(5, 1, 0.7);
        let before = club.params.clone();
        club.update(&c, &r).unwrap();
        for (a, b) in before.iter().zip(&club.params) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fit_reduces_variational_loss() {
        let (c, r) = correlated_pairs(512, 0.8, 7);
        let mut rng = stream_rng(5, Stream::ModelInit);
        let mut club = Club::new(1, 1, ClubConfig { hidden: vec![16], ..Default::default() }, &mut rng).unwrap();
        let before = club.update(&c, &r).unwrap();
        let mut fit_rng = stream_rng(6, Stream::Batching);
        club.fit(&c, &r, 5, 64, &mut fit_rng).unwrap();
        let after = {
            let mut tape = Tape::new();
            let vars = club.insert_params(&mut tape, false);
            let cv = tape.constant(c.clone());
            let rv = tape.constant(r.clone());
            let loss = club.variational_loss_tape(&mut tape, &vars, cv, rv).unwrap();
            tape.value(loss)[(0, 0)]
        };
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn logvar_clamp_is_applied() {
        let mut rng = stream_rng(9, Stream::ModelInit);
        let mut club = Club::new(1, 1, ClubConfig { hidden: vec![], logvar_clamp: 0.5, ..Default::default() }, &mut rng).unwrap();
        // Force a huge logvar via the bias of the output layer.
        club.params[1].set(0, 1, 100.0);
        let c = Matrix::filled(3, 1, 0.0);
        let mut tape = Tape::new();
        let vars = club.insert_params(&mut tape, false);
        let cv = tape.constant(c);
        let (_, logvar) = club.head_tape(&mut tape, &vars, cv).unwrap();
        for v in tape.value(logvar).data() {
            assert!(*v <= 0.5);
        }
    }

    #[test]
    fn update_moves_parameters() {
        let mut rng = stream_rng(11, Stream::ModelInit);
        let mut club = Club::new(2, 3, ClubConfig::default(), &mut rng).unwrap();
        let before = club.params.clone();
        let (c, _) = correlated_pairs(32, 0.0, 13);
        let c2 = c.concat_cols(&c).unwrap();
        let (r1, _) = correlated_pairs(32, 0.0, 14);
        let r = r1.concat_cols(&r1).unwrap().concat_cols(&r1).unwrap();
        club.update(&c2, &r).unwrap();
        let moved = before
            .iter()
            .zip(&club.params)
            .any(|(a, b)| a.max_abs_diff(b) > 0.0);
        assert!(moved);
    }
}
