//! Scratch calibration probe; not part of the suite.

use crbm_core::intervene::{run_suite, SuiteConfig};
use crbm_core::model::{train, Arch, Method, Model, TrainConfig};
use crbm_core::synth::{generate, TaskKind, TaskSpec};

fn probe_one(spec: &TaskSpec, method: Method, m: usize, seed: u64) {
    probe_beta(spec, method, m, seed, if method == Method::Mi { 0.1 } else { 1.0 });
}

fn probe_beta(spec: &TaskSpec, method: Method, m: usize, seed: u64, beta: f64) -> (f64, f64) {
    probe_full(spec, method, m, seed, beta, 1.0)
}

fn probe_full(
    spec: &TaskSpec,
    method: Method,
    m: usize,
    seed: u64,
    beta: f64,
    lambda: f64,
) -> (f64, f64) {
    let ds = generate(spec).unwrap();
    let arch = Arch {
        input_dim: ds.input_dim(),
        hidden: vec![64, 64],
        concept_dim: ds.concept_dim(),
        residual_dim: m,
        task_hidden: vec![std::env::var("PROBE_TH")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(32)],
        n_classes: ds.n_classes,
    };
    let mut cfg = TrainConfig::default();
    cfg.epochs = std::env::var("PROBE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    cfg.beta = beta;
    cfg.lambda_concept = lambda;
    cfg.seed = seed;
    let mut model = Model::new(arch, method, &cfg).unwrap();
    let stats = train(&mut model, &ds, &cfg).unwrap();
    let last = stats.last().unwrap();
    let report = run_suite(&model, &ds, &SuiteConfig::default()).unwrap();
    println!(
        "  {:>10} m={m:<2} seed={seed}: B {:.4} C+ {:.4} C- {:.4} R- {} val_last {:.4} ceiling {:?}",
        method.as_str(),
        report.b,
        report.c_pos,
        report.c_neg_mean,
        report.r_neg_mean.map_or("  --  ".into(), |v| format!("{v:.4}")),
        last.val_accuracy,
        ds.ceiling,
    );
    (report.b, report.c_pos)
}

#[test]
#[ignore]
fn probe_np() {
    let mut np = TaskSpec::grouped(TaskKind::Nonperformant, 6, 8, 4);
    np.input_noise = 0.5;
    println!("--- nonperformant k=6 g=8 l=4 (c=32) sigma=0.5, 3 seeds");
    for seed in 0..3u64 {
        probe_one(&np, Method::Bottleneck, 0, seed);
    }
    for seed in 0..3u64 {
        probe_one(&np, Method::Latent, 16, seed);
    }
}

#[test]
#[ignore]
fn probe_ip() {
    let mut ip = TaskSpec::grouped(TaskKind::IncompletePerformant, 6, 10, 5);
    ip.input_noise = 0.5;
    let lambda = 4.0;
    println!("--- ip k=6 g=10 l=5 sigma=0.5 lambda={lambda} beta_mi=0.05, 3 seeds");
    let mut means = std::collections::BTreeMap::<&str, (f64, f64)>::new();
    for (method, m, beta) in [
        (Method::Bottleneck, 0usize, 1.0),
        (Method::Latent, 16, 1.0),
        (Method::Decorr, 16, 1.0),
        (Method::Iternorm, 16, 1.0),
        (Method::Mi, 16, 0.05),
    ] {
        let mut b_sum = 0.0;
        let mut cpos_sum = 0.0;
        for seed in 0..3u64 {
            let (b, cpos) = probe_full(&ip, method, m, seed, beta, lambda);
            b_sum += b;
            cpos_sum += cpos;
        }
        means.insert(method.as_str(), (b_sum / 3.0, cpos_sum / 3.0));
    }
    for (name, (b, cpos)) in &means {
        println!("  MEAN {name:>10}: B {b:.4} C+ {cpos:.4}");
    }
    let ceiling = 0.2;
    println!("  clause1 bneck window: {:.4} in [0.15,0.25]", means["bottleneck"].0);
    for name in ["latent", "decorr", "iternorm", "mi"] {
        println!("  clause2 {name} B >= {:.2}: {:.4}", ceiling + 0.2, means[name].0);
    }
    println!(
        "  clause3 C+(mi) {:.4} >= C+(latent) {:.4}: gap {:+.4}",
        means["mi"].1,
        means["latent"].1,
        means["mi"].1 - means["latent"].1
    );
}
