//! Cross-correlation penalty between the concept signal and the residual.
//!
//! Both batches are centered, the k x m cross-covariance block is formed, and
//! its squared entries are summed. `CrossBlock` penalizes the whole block,
//! which is the intent of decorrelating two *different* signal groups;
//! `LiteralOffdiag` skips the "diagonal" entries (i == j) of that rectangular
//! block and exists to show how much that variant under-penalizes.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecorrPolicy {
    CrossBlock,
    LiteralOffdiag,
}

impl Default for DecorrPolicy {
    fn default() -> Self {
        DecorrPolicy::CrossBlock
    }
}

/// Builds the decorrelation loss on the tape: sum of squared entries of the
/// batch cross-covariance (1/b) C~^T R~ between centered concepts and
/// centered residuals, masked per policy. Returns a 1x1 node.
pub fn decorr_loss_tape(tape: &mut Tape, c: Var, r: Var, policy: DecorrPolicy) -> Result<Var> {
    let (b, k) = tape.value(c).shape();
    let m = tape.value(r).cols();
    let c_cent = tape.center_cols(c)?;
    let r_cent = tape.center_cols(r)?;
    let ct = tape.transpose(c_cent)?;
    let cross = tape.matmul(ct, r_cent)?;
    let cross = tape.mul_scalar(cross, 1.0 / b as f64)?;
    let masked = match policy {
        DecorrPolicy::CrossBlock => cross,
        DecorrPolicy::LiteralOffdiag => {
            let mask = Matrix::from_fn(k, m, |i, j| if i == j { 0.0 } else { 1.0 });
            let mask = tape.constant(mask);
            tape.mul(cross, mask)?
        }
    };
    let sq = tape.square(masked)?;
    tape.reduce_sum(sq)
}

/// Value-level convenience used by tests and metrics.
pub fn decorr_loss(c: &Matrix, r: &Matrix, policy: DecorrPolicy) -> Result<f64> {
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let rv = tape.constant(r.clone());
    let loss = decorr_loss_tape(&mut tape, cv, rv, policy)?;
    Ok(tape.value(loss)[(0, 0)])
}
