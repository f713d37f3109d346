//! Built-in oracle battery: every numerical contract the workbench depends
//! on, checked against an independent reference in a few seconds.
//!
//! `selftest` is the thing to run after touching any numeric code. It is
//! deliberately redundant with the unit suites — a broken install should
//! fail here without needing a dev checkout.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crbm_core::club::{Club, ClubConfig};
use crbm_core::decorr::{decorr_loss, DecorrPolicy};
use crbm_core::error::{CoreError, Result};
use crbm_core::gradcheck::{run_all, GRADCHECK_TOL};
use crbm_core::matrix::Matrix;
use crbm_core::model::{train, Arch, Method, Model, TrainConfig};
use crbm_core::rng::{stream_rng, Stream};
use crbm_core::synth::{generate, load_csv, save_csv, TaskSpec};
use crbm_core::whiten::{
    covariance_identity_gap, iternorm_train_value, zca_whiten_exact, WhitenConfig, WhitenState,
};

pub struct Check {
    pub name: &'static str,
    /// Ok carries a one-line detail for the PASS printout.
    pub outcome: Result<String>,
}

fn fail(msg: String) -> Result<String> {
    Err(CoreError::InvalidConfig(msg))
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Batch whose sample covariance has the given eigenvalues exactly.
fn spd_batch(b: usize, eigenvalues: &[f64], seed: u64) -> Result<Matrix> {
    let p = eigenvalues.len();
    let unit = zca_whiten_exact(&gaussian(b, p, seed), 0.0)?.out;
    let spread = Matrix::from_fn(p, p, |i, j| {
        if i == j {
            eigenvalues[i].sqrt()
        } else {
            0.0
        }
    });
    unit.matmul(&spread)
}

fn check_gradients() -> Result<String> {
    let report = run_all(0)?;
    if !report.all_within(GRADCHECK_TOL) {
        return fail(format!(
            "worst relative error {:.3e} exceeds {GRADCHECK_TOL:.0e}",
            report.worst()
        ));
    }
    Ok(format!(
        "{} cases, worst relative error {:.2e}",
        report.cases.len(),
        report.worst()
    ))
}

fn check_whitening() -> Result<String> {
    // Spectrum spread over [0.15, 1]: condition ~7, well inside the Newton
    // basin at the production iteration count.
    let eigenvalues: Vec<f64> = (0..16)
        .map(|i| 0.15 * (1.0 / 0.15_f64).powf(i as f64 / 15.0))
        .collect();
    let x = spd_batch(512, &eigenvalues, 7)?;

    let exact = zca_whiten_exact(&x, 0.0)?.out;
    let exact_gap = covariance_identity_gap(&exact)?;
    if exact_gap > 1e-6 {
        return fail(format!("exact whitening covariance gap {exact_gap:.3e}"));
    }

    let mut state = WhitenState::new(16, WhitenConfig::default());
    let fast = iternorm_train_value(&x, &mut state)?;
    let fast_gap = covariance_identity_gap(&fast)?;
    if fast_gap > 0.05 {
        return fail(format!("iterative whitening covariance gap {fast_gap:.3e}"));
    }

    let mut long = WhitenState::new(16, WhitenConfig { iterations: 10, ..Default::default() });
    let converged = iternorm_train_value(&x, &mut long)?;
    let oracle = zca_whiten_exact(&x, long.cfg.eps)?.out;
    let agreement = converged.sub(&oracle)?.frobenius_norm();
    if agreement > 1e-3 {
        return fail(format!("iterative vs exact disagree by {agreement:.3e}"));
    }
    Ok(format!(
        "gaps: exact {exact_gap:.1e}, iterative {fast_gap:.3}, agreement {agreement:.1e}"
    ))
}

fn check_club_identity() -> Result<String> {
    let mut rng = stream_rng(3, Stream::ModelInit);
    let n = 512;
    let rho = 0.8;
    let g1 = gaussian(n, 1, 11);
    let g2 = gaussian(n, 1, 12);
    let r = Matrix::from_fn(n, 1, |i, _| {
        rho * g1[(i, 0)] + (1.0 - rho * rho).sqrt() * g2[(i, 0)]
    });
    let mut club = Club::new(1, 1, ClubConfig::default(), &mut rng)?;
    let mut fit_rng = stream_rng(4, Stream::ClubPermutation);
    club.fit(&g1, &r, 3, 128, &mut fit_rng)?;
    let identity: Vec<usize> = (0..n).collect();
    let est = club.mi_estimate(&g1, &r, &identity)?;
    if est != 0.0 {
        return fail(format!("identity permutation gave {est:.3e}, want exactly 0"));
    }
    Ok("identity permutation estimate is exactly zero".into())
}

/// Correlated scalar Gaussian pair with the given correlation.
fn gaussian_pair(n: usize, rho: f64, seed_a: u64, seed_b: u64) -> (Matrix, Matrix) {
    let c = gaussian(n, 1, seed_a);
    let noise = gaussian(n, 1, seed_b);
    let r = Matrix::from_fn(n, 1, |i, _| {
        rho * c[(i, 0)] + (1.0 - rho * rho).sqrt() * noise[(i, 0)]
    });
    (c, r)
}

fn check_club_calibration() -> Result<String> {
    // At the optimal variational density the estimator converges to
    // rho^2 / (1 - rho^2), the closed-form value of the upper bound on a
    // scalar Gaussian pair (it exceeds the true mutual information
    // -0.5 ln(1 - rho^2) by a Jensen gap). Calibration is checked on a
    // held-out draw so overfitting cannot flatter the fit.
    let n = 4096;
    let rho: f64 = 0.8;
    let bound = rho * rho / (1.0 - rho * rho);
    let (c_fit, r_fit) = gaussian_pair(n, rho, 13, 14);
    let (c_te, r_te) = gaussian_pair(n, rho, 15, 16);

    let mut rng = stream_rng(5, Stream::ModelInit);
    let mut club = Club::new(1, 1, ClubConfig::default(), &mut rng)?;
    let mut fit_rng = stream_rng(6, Stream::ClubPermutation);
    club.fit(&c_fit, &r_fit, 5, 128, &mut fit_rng)?;
    let mut perm_rng = stream_rng(7, Stream::ClubPermutation);
    let est = club.mi_estimate_avg(&c_te, &r_te, 8, &mut perm_rng)?;
    if (est - bound).abs() > 0.3 {
        return fail(format!(
            "estimate {est:.3} vs analytic bound {bound:.3} (correlation {rho})"
        ));
    }

    let (c0_fit, r0_fit) = gaussian_pair(n, 0.0, 17, 18);
    let (c0_te, r0_te) = gaussian_pair(n, 0.0, 19, 20);
    let mut club0 = Club::new(1, 1, ClubConfig::default(), &mut rng)?;
    let mut fit0_rng = stream_rng(8, Stream::ClubPermutation);
    club0.fit(&c0_fit, &r0_fit, 5, 128, &mut fit0_rng)?;
    let mut perm0_rng = stream_rng(9, Stream::ClubPermutation);
    let est0 = club0.mi_estimate_avg(&c0_te, &r0_te, 8, &mut perm0_rng)?;
    if est0.abs() > 0.08 {
        return fail(format!("estimate {est0:.3} on independent pair, want ~0"));
    }
    Ok(format!(
        "rho 0.8: estimate {est:.3} vs bound {bound:.3}; rho 0: {est0:.3}"
    ))
}

fn check_decorr() -> Result<String> {
    let c = gaussian(64, 3, 21);
    let r = gaussian(64, 4, 22);
    let ab = decorr_loss(&c, &r, DecorrPolicy::CrossBlock)?;
    let ba = decorr_loss(&r, &c, DecorrPolicy::CrossBlock)?;
    if ab < 0.0 {
        return fail(format!("loss {ab:.3e} is negative"));
    }
    if (ab - ba).abs() > 1e-12 {
        return fail(format!("asymmetry {:.3e}", (ab - ba).abs()));
    }
    // Independent unit Gaussians keep every cross-covariance entry near
    // zero; a residual that copies a concept column scores its variance
    // squared, near 1.
    if ab > 0.35 {
        return fail(format!("independent batches score {ab:.3}"));
    }
    let copy = Matrix::from_fn(64, 2, |i, j| if j == 0 { c[(i, 0)] } else { r[(i, 1)] });
    let leak = decorr_loss(&c, &copy, DecorrPolicy::CrossBlock)?;
    if leak < 0.5 {
        return fail(format!("copied column scores only {leak:.3}"));
    }
    Ok(format!("symmetric, baseline {ab:.2e}, leaked copy {leak:.2}"))
}

fn check_csv_round_trip() -> Result<String> {
    let spec = TaskSpec {
        n_train: 60,
        n_val: 20,
        n_test: 20,
        d: 6,
        ..TaskSpec::complete(3, 4)
    };
    let ds = generate(&spec)?;
    let path = std::env::temp_dir().join(format!("crbm_selftest_{}.csv", std::process::id()));
    save_csv(&ds, &path)?;
    let back = load_csv(&path);
    let _ = std::fs::remove_file(&path);
    let back = back?;
    if back.len() != ds.len() || back.y != ds.y || back.split != ds.split {
        return fail("row data changed across the round trip".into());
    }
    if back.x.max_abs_diff(&ds.x) > 1e-12 || back.c.max_abs_diff(&ds.c) > 0.0 {
        return fail("matrix data changed across the round trip".into());
    }
    Ok(format!("{} rows intact", ds.len()))
}

fn tiny_setup() -> (TaskSpec, Arch) {
    let spec = TaskSpec {
        n_train: 300,
        n_val: 80,
        n_test: 120,
        d: 10,
        seed: 9,
        ..TaskSpec::complete(3, 4)
    };
    let arch = Arch {
        input_dim: 10,
        hidden: vec![16],
        concept_dim: 3,
        residual_dim: 4,
        task_hidden: vec![8],
        n_classes: 4,
    };
    (spec, arch)
}

fn check_determinism() -> Result<String> {
    let (spec, arch) = tiny_setup();
    let ds = generate(&spec)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch: 64,
        club: ClubConfig { hidden: vec![8], ..Default::default() },
        seed: 17,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let mut model = Model::new(arch.clone(), Method::Mi, &cfg)?;
        train(&mut model, &ds, &cfg)?;
        snapshots.push(model.to_json()?);
    }
    if snapshots[0] != snapshots[1] {
        return fail("two identically seeded runs produced different weights".into());
    }
    Ok("repeated runs reproduce weights bit-for-bit".into())
}

fn check_stop_gradient() -> Result<String> {
    let (spec, arch) = tiny_setup();
    let ds = generate(&spec)?;
    let mut rng = stream_rng(2, Stream::Batching);
    let idx: Vec<usize> = (0..64).map(|_| rng.gen_range(0..ds.len())).collect();
    let x = ds.x.gather_rows(&idx)?;
    let c = ds.c.gather_rows(&idx)?;
    let y: Vec<usize> = idx.iter().map(|&i| ds.y[i]).collect();
    for method in Method::ALL {
        let mut a = arch.clone();
        if method == Method::Bottleneck {
            a.residual_dim = 0;
        }
        let cfg = TrainConfig {
            club: ClubConfig { hidden: vec![8], ..Default::default() },
            ..TrainConfig::default()
        };
        let model = Model::new(a, method, &cfg)?;
        for (name, grad) in model.task_only_gradients(&x, &c, &y)? {
            if name.starts_with("concept.") && grad.is_some() {
                return fail(format!(
                    "{}: task loss reaches {name}",
                    method.as_str()
                ));
            }
        }
    }
    Ok("task gradients never reach the concept head in any method".into())
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        Check { name: "gradients", outcome: check_gradients() },
        Check { name: "whitening", outcome: check_whitening() },
        Check { name: "club_identity", outcome: check_club_identity() },
        Check { name: "club_calibration", outcome: check_club_calibration() },
        Check { name: "decorrelation", outcome: check_decorr() },
        Check { name: "csv_round_trip", outcome: check_csv_round_trip() },
        Check { name: "determinism", outcome: check_determinism() },
        Check { name: "stop_gradient", outcome: check_stop_gradient() },
    ]
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.outcome.is_ok())
}
