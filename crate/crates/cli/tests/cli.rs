//! End-to-end behavior of the `crbm` binary: determinism, idempotence,
//! results-dir resolution, exit codes, and report generation.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crbm"))
}

fn task_json() -> &'static str {
    r#"{"kind": "complete", "k": 3, "l": 1, "n_groups": 1, "n_classes": 4,
        "d": 10, "input_noise": 0.1, "concept_flip_prob": 0.0,
        "n_train": 300, "n_val": 80, "n_test": 200, "seed": 5}"#
}

fn run_config(method: &str, m: usize, seed: u64) -> String {
    format!(
        r#"{{
        "task": {task},
        "model": {{"hidden": [16], "task_hidden": [8], "residual_dim": {m}, "method": "{method}"}},
        "train": {{"epochs": 2, "batch": 64, "club_hidden": [8], "seed": {seed}}},
        "eval": {{"intervention_seeds": [0, 1], "posthoc_mi_epochs": 2}}
    }}"#,
        task = task_json()
    )
}

fn record_values(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|s| s.to_str()) != Some("json") {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        // Accuracy fields exactly as serialized, for bitwise comparison.
        let key = path.file_name().unwrap().to_str().unwrap().to_string();
        let acc = format!(
            "{} {} {} {} {} {}",
            value["B"], value["C_pos"], value["C_neg"], value["R_neg"],
            value["cc_metric"], value["mi_metric"],
        );
        out.push((key, acc));
    }
    out.sort();
    out
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn gen_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("task.json");
    fs::write(&spec, task_json()).unwrap();
    let csv = dir.path().join("data.csv");
    let out = bin().arg("gen").arg(&spec).arg("--out").arg(&csv).output().unwrap();
    assert_ok(&out);
    let ds = crbm_core::synth::load_csv(&csv).unwrap();
    assert_eq!(ds.len(), 580);
    assert_eq!(ds.concept_dim(), 3);
}

#[test]
fn run_twice_yields_identical_accuracies_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, run_config("mi", 4, 0)).unwrap();
    let res = dir.path().join("res");

    let first = bin().arg("--results-dir").arg(&res).arg("run").arg(&cfg).output().unwrap();
    assert_ok(&first);
    let values_first = record_values(&res);

    let second = bin().arg("--results-dir").arg(&res).arg("run").arg(&cfg).output().unwrap();
    assert_ok(&second);
    assert!(String::from_utf8_lossy(&second.stdout).starts_with("kept "));
    assert_eq!(record_values(&res), values_first);

    let forced = bin()
        .arg("--results-dir").arg(&res)
        .arg("run").arg(&cfg).arg("--force")
        .output()
        .unwrap();
    assert_ok(&forced);
    assert!(String::from_utf8_lossy(&forced.stdout).starts_with("wrote "));
    assert_eq!(record_values(&res), values_first, "forced rerun must reproduce");
}

#[test]
fn results_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, run_config("latent", 4, 1)).unwrap();
    let res = dir.path().join("from_env");
    let out = bin()
        .env("CRBM_RESULTS_DIR", &res)
        .arg("run").arg(&cfg)
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(record_values(&res).len(), 1);
}

#[test]
fn sweep_worker_count_does_not_change_records() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        format!(
            r#"{{
            "tasks": [{task}],
            "methods": ["bottleneck", "latent"],
            "residual_dims": [4],
            "seeds": [0, 1],
            "model": {{"hidden": [16], "task_hidden": [8]}},
            "train": {{"epochs": 2, "batch": 64, "club_hidden": [8]}},
            "eval": {{"intervention_seeds": [0, 1], "posthoc_mi_epochs": 2}}
        }}"#,
            task = task_json()
        ),
    )
    .unwrap();

    let res_seq = dir.path().join("seq");
    let res_par = dir.path().join("par");
    let seq = bin()
        .arg("--results-dir").arg(&res_seq)
        .arg("sweep").arg(&grid).arg("--jobs").arg("1")
        .output()
        .unwrap();
    assert_ok(&seq);
    let par = bin()
        .arg("--results-dir").arg(&res_par)
        .arg("sweep").arg(&grid).arg("--jobs").arg("4")
        .output()
        .unwrap();
    assert_ok(&par);

    let a = record_values(&res_seq);
    let b = record_values(&res_par);
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);

    // Re-invoking skips every cell.
    let again = bin()
        .arg("--results-dir").arg(&res_seq)
        .arg("sweep").arg(&grid).arg("--jobs").arg("1")
        .output()
        .unwrap();
    assert_ok(&again);
    let text = String::from_utf8_lossy(&again.stdout);
    assert!(text.contains("0 ran, 4 skipped, 0 failed"), "{text}");
}

#[test]
fn report_produces_tables_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = dir.path().join("a.json");
    let cfg_b = dir.path().join("b.json");
    fs::write(&cfg_a, run_config("latent", 4, 0)).unwrap();
    fs::write(&cfg_b, run_config("latent", 4, 1)).unwrap();
    let res = dir.path().join("res");
    for cfg in [&cfg_a, &cfg_b] {
        assert_ok(&bin().arg("--results-dir").arg(&res).arg("run").arg(cfg).output().unwrap());
    }
    let rep = dir.path().join("rep");
    let out = bin().arg("report").arg(&res).arg("--out").arg(&rep).output().unwrap();
    assert_ok(&out);

    let table = fs::read_to_string(rep.join("table1_complete_k3_c4.csv")).unwrap();
    assert!(table.lines().count() >= 2);
    assert!(table.lines().nth(1).unwrap().starts_with("latent,4,2,"));

    let curves: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep.join("curves.json")).unwrap()).unwrap();
    assert!(curves["complete_k3_c4"]["latent"]["B"][0]["mean"].is_number());

    let records = fs::read_to_string(rep.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3);
}

#[test]
fn failure_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Missing config file -> 2.
    let out = bin().arg("run").arg(dir.path().join("nope.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Invalid config (bottleneck with a residual) -> 2, with the field named.
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, run_config("bottleneck", 4, 0)).unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.residual_dim"), "{err}");

    // Divergent training -> 3.
    let cfg = dir.path().join("diverge.json");
    fs::write(
        &cfg,
        format!(
            r#"{{
            "task": {task},
            "model": {{"hidden": [16], "task_hidden": [8], "residual_dim": 4, "method": "iternorm"}},
            "train": {{"epochs": 1, "batch": 64, "lr": 1e200, "seed": 0}}
        }}"#,
            task = task_json()
        ),
    )
    .unwrap();
    let out = bin()
        .arg("--results-dir").arg(dir.path().join("res"))
        .arg("run").arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Empty grid -> 2.
    let grid = dir.path().join("empty.json");
    fs::write(
        &grid,
        r#"{"tasks": [], "methods": ["latent"], "residual_dims": [4], "seeds": [0]}"#,
    )
    .unwrap();
    let out = bin().arg("sweep").arg(&grid).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_verb_passes() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradcheck:"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}
