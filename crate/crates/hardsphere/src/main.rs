use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hardsphere::harness::{fit_rate, read_rates, run_study, validate_config, Only, RunOptions, StudyConfig};
use hardsphere::{Error, Result};

#[derive(Parser)]
#[command(name = "hardsphere", about = "Low Mach number convergence studies")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict the per-point evaluation to one test: limit-distance, rei or mean-pressure.
    #[arg(long)]
    only: Option<Only>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cells per axis at the largest eps.
    #[arg(long)]
    resolution_override: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Check every admissibility condition and print the sweep points.
    Validate(StudyArgs),
    /// Run the sweep and write rates.csv, report.json and plot.gp.
    Run(StudyArgs),
    /// Fit log-log slopes to an existing rates.csv.
    Fit {
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an existing report.json.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(args: &StudyArgs) -> Result<StudyConfig> {
    let mut cfg = StudyConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.resolution_override {
        cfg.grid.cells = n;
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::Validate(args) => {
            let norm = validate_config(&load(&args)?)?;
            println!("{}", serde_json::to_string_pretty(&norm)?);
            Ok(true)
        }
        Verb::Run(args) => {
            let norm = validate_config(&load(&args)?)?;
            let start = std::time::Instant::now();
            let rep = run_study(&norm, &RunOptions { only: args.only, out: None })?;
            for r in &rep.rows {
                println!(
                    "eps={:.4} nu={:.4} R={:.3} vel_gap={:.3e} dens_gap={:.3e} bound={:.3e} rei={:?} {}",
                    r.eps,
                    r.nu,
                    r.radius,
                    r.sup_vel_gap,
                    r.sup_dens_gap,
                    r.rhs_bound,
                    r.rei_pass,
                    r.error.as_deref().unwrap_or("")
                );
            }
            if let (Some(v), Some(d)) = (rep.velocity_fit, rep.density_fit) {
                println!("slopes: velocity {:.3} ± {:.3}, density {:.3} ± {:.3}", v.slope, v.stderr, d.slope, d.stderr);
            }
            println!("{} in {:.1?}", if rep.pass { "PASS" } else { "FAIL" }, start.elapsed());
            Ok(rep.pass)
        }
        Verb::Fit { out } => {
            let rows = read_rates(&out.join("rates.csv"))?;
            let eps: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let v = fit_rate(&eps, &rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
            let d = fit_rate(&eps, &rows.iter().map(|r| r.2).collect::<Vec<_>>())?;
            println!("velocity slope {:.4} ± {:.4}", v.slope, v.stderr);
            println!("density slope {:.4} ± {:.4}", d.slope, d.stderr);
            Ok(v.slope > 0.0 && d.slope > 0.0)
        }
        Verb::Report { out } => {
            let text = std::fs::read_to_string(out.join("report.json"))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let pass = v["pass"].as_bool().ok_or_else(|| Error::Config("report.json has no pass flag".into()))?;
            println!("scenario {} config {}", v["scenario"], v["config_hash"]);
            for r in v["rows"].as_array().into_iter().flatten() {
                println!("eps={} vel_gap={} dens_gap={} bound={} rei={} error={}", r["eps"], r["sup_vel_gap"], r["sup_dens_gap"], r["rhs_bound"], r["rei_pass"], r["error"]);
            }
            println!("{}", if pass { "PASS" } else { "FAIL" });
            Ok(pass)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
