//! The file-based pipeline on a configuration: data, operators, density
//! program, controllers, simulation and output checks.
//!
//! `cargo run --release --example pipeline_run -- configs/duffing.json`

use std::path::PathBuf;

use density_ocp::pipeline::{check_outputs, fit, gen_data, simulate, solve, PipelineConfig};

fn main() -> density_ocp::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "configs/scalar.json".into());
    let mut cfg = PipelineConfig::load(&PathBuf::from(&path))?;
    cfg.output_dir = std::env::temp_dir().join("density-ocp-example");
    gen_data(&cfg)?;
    fit(&cfg)?;
    let out = solve(&cfg)?;
    println!(
        "density program: {:?}, objective {:.4e}",
        out.solution.status, out.solution.objective
    );
    let report = simulate(&cfg)?;
    println!(
        "stability fraction {:.2} over {} runs",
        report.stability_fraction,
        report.trajectories.len()
    );
    let check = check_outputs(&cfg)?;
    println!(
        "checks passed: {} ({} failures)",
        check.passed,
        check.failures.len()
    );
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}
