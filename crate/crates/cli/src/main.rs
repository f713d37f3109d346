use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crbm_cli::config::{ExperimentConfig, GridSpec};
use crbm_cli::report::{load_records, write_report};
use crbm_cli::runner::{run_experiment, summarize_cells, sweep};
use crbm_cli::selftest::run_selftest;
use crbm_cli::{exit_code, resolve_results_dir};
use crbm_core::error::{CoreError, Result};
use crbm_core::gradcheck::{run_all, GRADCHECK_TOL};
use crbm_core::synth::{generate, save_csv, TaskSpec};

#[derive(Parser)]
#[command(
    name = "crbm",
    version,
    about = "Concept-residual bottleneck workbench: train, intervene, report"
)]
struct Cli {
    /// Directory for result records (overrides CRBM_RESULTS_DIR).
    #[arg(long, global = true, value_name = "DIR")]
    results_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as CSV.
    Gen {
        /// Task spec JSON file.
        task: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment config end to end.
    Run {
        /// Experiment config JSON file.
        config: PathBuf,
        /// Re-run even if a record for this config already exists.
        #[arg(long)]
        force: bool,
    },
    /// Expand a sweep grid and run every cell.
    Sweep {
        /// Grid spec JSON file.
        grid: PathBuf,
        /// Worker count; 0 means all cores, 1 forces sequential.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Re-run cells that already have records.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate result records into tables and plot data.
    Report {
        /// Directory of result records.
        results: PathBuf,
        /// Output directory for tables and plot data.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the built-in oracle battery.
    Selftest,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| {
            CoreError::InvalidConfig(format!("{what} {}: {e}", path.display()))
        })?;
    serde_json::from_str(&text)
        .map_err(|e| CoreError::InvalidConfig(format!("{what} {}: {e}", path.display())))
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { task, out } => {
            let spec: TaskSpec = read_json(&task, "task spec")?;
            let ds = generate(&spec)?;
            save_csv(&ds, &out)?;
            println!(
                "wrote {} ({} rows, {} features, {} concepts, {} classes)",
                out.display(),
                ds.len(),
                ds.input_dim(),
                ds.concept_dim(),
                ds.n_classes
            );
        }
        Cmd::Run { config, force } => {
            let cfg: ExperimentConfig = read_json(&config, "experiment config")?;
            let dir = resolve_results_dir(cli.results_dir);
            let outcome = run_experiment(&cfg, &dir, force)?;
            let r = &outcome.record;
            let verb = if outcome.skipped { "kept" } else { "wrote" };
            println!(
                "{verb} {} (B {:.4}, C+ {:.4}, C- {:.4}{})",
                outcome.path.display(),
                r.b,
                r.c_pos,
                r.c_neg,
                r.r_neg
                    .map(|v| format!(", R- {v:.4}"))
                    .unwrap_or_default()
            );
        }
        Cmd::Sweep { grid, jobs, force } => {
            let spec: GridSpec = read_json(&grid, "sweep grid")?;
            let dir = resolve_results_dir(cli.results_dir);
            let outcomes = sweep(&spec, &dir, jobs, force)?;
            for cell in &outcomes {
                match &cell.outcome {
                    Ok(o) if o.skipped => println!("skip {}", cell.label),
                    Ok(_) => println!("done {}", cell.label),
                    Err(e) => println!("FAIL {}: {e}", cell.label),
                }
            }
            let s = summarize_cells(&outcomes);
            println!(
                "sweep: {} ran, {} skipped, {} failed, records in {}",
                s.ran,
                s.skipped,
                s.failed,
                dir.display()
            );
        }
        Cmd::Report { results, out } => {
            let records = load_records(&results)?;
            let report = write_report(&records, &out)?;
            println!("aggregated {} records:", records.len());
            for f in &report.files {
                println!("  {}", f.display());
            }
        }
        Cmd::Gradcheck { seed } => {
            let report = run_all(seed)?;
            for case in &report.cases {
                let verdict = if case.max_rel_err <= GRADCHECK_TOL { "ok" } else { "FAIL" };
                println!("{verdict:4} {:28} max rel err {:.3e}", case.name, case.max_rel_err);
            }
            if !report.all_within(GRADCHECK_TOL) {
                return Err(CoreError::NonFinite {
                    op: "gradcheck",
                    context: format!("worst relative error {:.3e}", report.worst()),
                });
            }
            println!(
                "gradcheck: {} cases within {GRADCHECK_TOL:.0e} (worst {:.3e})",
                report.cases.len(),
                report.worst()
            );
        }
        Cmd::Selftest => {
            let checks = run_selftest();
            let mut failed = 0;
            for check in &checks {
                match &check.outcome {
                    Ok(detail) => println!("PASS {:18} {detail}", check.name),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {:18} {e}", check.name);
                    }
                }
            }
            if failed > 0 {
                return Err(CoreError::NonFinite {
                    op: "selftest",
                    context: format!("{failed} of {} checks failed", checks.len()),
                });
            }
            println!("selftest: all {} checks passed", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
