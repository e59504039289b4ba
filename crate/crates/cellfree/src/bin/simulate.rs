use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cellfree::config::{parse_association, CsiMode, SimulationConfig, Strategy};
use cellfree::error::{Error, Result};
use cellfree::sim::{emit_results, run_campaign};

/// Monte Carlo rate simulator for distributed MIMO networks.
#[derive(Parser, Debug)]
#[command(name = "simulate", version, about)]
struct Args {
    /// Config file path, or a preset name: high_density, low_density.
    #[arg(long)]
    config: String,

    /// Override the number of drops.
    #[arg(long)]
    drops: Option<usize>,

    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Comma-separated power strategies: uniform,srmax,mrmax.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,

    /// AP-MS association rule: cf, topn:N, or above_average.
    #[arg(long)]
    association: Option<String>,

    /// Channel knowledge: perfect, estimated, or both.
    #[arg(long)]
    csi: Option<String>,

    /// Dump per-drop solver traces under <out>/traces/.
    #[arg(long)]
    trace: bool,

    /// Output directory (defaults to the config's sim.output_dir).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker thread count (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn apply_overrides(config: &mut SimulationConfig, args: &Args) -> Result<()> {
    if let Some(n) = args.drops {
        config.sim.n_drops = n;
    }
    if let Some(s) = args.seed {
        config.sim.seed = s;
    }
    if let Some(tokens) = &args.strategies {
        let mut strategies = Vec::new();
        for t in tokens {
            strategies.push(Strategy::parse(t)?);
        }
        config.sim.strategies = strategies;
    }
    if let Some(mode) = &args.association {
        parse_association(mode)?;
        config.association.mode = mode.clone();
    }
    if let Some(csi) = &args.csi {
        config.sim.csi_modes = match csi.as_str() {
            "perfect" => vec![CsiMode::Perfect],
            "estimated" => vec![CsiMode::Estimated],
            "both" => vec![CsiMode::Perfect, CsiMode::Estimated],
            other => {
                return Err(Error::Config(format!(
                    "unknown CSI mode '{other}' (expected perfect, estimated, or both)"
                )))
            }
        };
    }
    if args.trace {
        config.sim.trace = true;
    }
    if let Some(out) = &args.out {
        config.sim.output_dir = out.display().to_string();
    }
    Ok(())
}

fn run(args: &Args) -> Result<()> {
    let mut config = SimulationConfig::load(&args.config)?;
    apply_overrides(&mut config, args)?;
    config.validate()?;

    let report = run_campaign(&config, args.threads)?;
    for (drop, error) in &report.failed {
        eprintln!(
            "{}",
            serde_json::json!({ "warning": "drop failed", "drop": drop, "error": error })
        );
    }
    if report.drops.is_empty() {
        return Err(Error::Numerical("every drop failed".into()));
    }

    let out_dir = PathBuf::from(&config.sim.output_dir);
    let written = emit_results(&report, &config, &out_dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    let capped = report
        .drops
        .iter()
        .filter(|d| d.diagnostics.time_cap_exceeded)
        .count();
    println!(
        "drops: {} ok, {} failed, {} over time cap",
        report.drops.len(),
        report.failed.len(),
        capped
    );
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                Error::InvalidParameter(_) => "parameter",
                Error::Numerical(_) => "numerical",
                Error::Config(_) => "config",
                Error::Io(_) => "io",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
            ExitCode::FAILURE
        }
    }
}
