use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stability_lab::experiments::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutput};
use stability_lab::optim::Mode;
use stability_lab::LabError;

#[derive(Parser)]
#[command(name = "stability-lab", version, about = "Sharpness and stability of SGD/GD minima")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One clipped SGD run on the ReLU problem with dense snapshots.
    ReluProcess(Common),
    /// SGD and GD over a learning-rate grid on the ReLU problem.
    ReluSweep(Common),
    /// SGD and GD over learning-rate grids on the diagonal network.
    DiagSweep(Common),
    /// Final balancedness against the unbalancedness of the init.
    DiagBalance(Common),
    /// Fisher metric / parameter norm ratios at random parameters.
    VerifyEquivalence {
        #[command(flatten)]
        common: Common,
        /// Model family when no config file is given.
        #[arg(long, value_enum)]
        family: Option<Family>,
    },
    /// Stability checks at the final parameters of a saved run.
    Classify(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Relu,
    Diag,
}

#[derive(Args)]
struct Common {
    /// JSON config; the built-in default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated learning rates, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    /// Print the effective config as JSON and exit without running.
    #[arg(long)]
    dump_config: bool,
}

enum Loaded {
    Run(ExperimentConfig, PathBuf),
    Dump(ExperimentConfig),
}

fn load(common: &Common, allowed: &[ExperimentKind]) -> Result<Loaded, LabError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(allowed[0]),
    };
    if !allowed.contains(&config.experiment) {
        return Err(LabError::Config(format!(
            "config describes {}, not {}",
            config.experiment.name(),
            allowed[0].name()
        )));
    }
    if let Some(seeds) = &common.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(grid) = &common.lr_grid {
        config.lr_grid = grid.clone();
    }
    config.validate()?;
    if common.dump_config {
        return Ok(Loaded::Dump(config));
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| LabError::Config("no output directory: pass --out".into()))?;
    Ok(Loaded::Run(config, out))
}

fn describe(output: &ExperimentOutput) -> String {
    let mut lines = Vec::new();
    match output {
        ExperimentOutput::Process(runs) => {
            for s in runs {
                lines.push(format!(
                    "seed {}: {} after {} iterations, tr(G) = {} (2/η = {}), clip-free final 10%: {}",
                    s.seed,
                    if s.converged { "converged" } else { "not converged" },
                    s.iterations,
                    s.final_trace.map_or("n/a".into(), |t| format!("{t:.4}")),
                    s.two_over_eta,
                    s.clip_free_tail
                ));
            }
        }
        ExperimentOutput::Sweep(result) => {
            for p in &result.points {
                lines.push(format!(
                    "{} η = {:.4e}: {}/{} converged, {} diverged, median tr(G) = {}, ‖G‖₂ = {}, test risk = {}",
                    if p.mode == Mode::Sgd { "SGD" } else { "GD " },
                    p.learning_rate,
                    p.converged,
                    p.runs,
                    p.diverged,
                    fmt(p.median_trace),
                    fmt(p.median_spectral),
                    fmt(p.median_test_risk)
                ));
            }
        }
        ExperimentOutput::Balance(result) => {
            for r in &result.rows {
                lines.push(format!(
                    "r0 = {} seed {} {}: r(init) = {:.4}, r(final) = {}",
                    r.r0,
                    r.seed,
                    r.mode_name(),
                    r.init_balancedness,
                    fmt(r.final_balancedness)
                ));
            }
        }
        ExperimentOutput::Equivalence(result) => {
            for w in &result.warnings {
                lines.push(format!("warning: {w}"));
            }
            for r in &result.ratios {
                lines.push(format!(
                    "{}: min {:.4} median {:.4} max {:.4} in [{}, {}]: {}",
                    r.name, r.min, r.median, r.max, r.lo, r.hi, r.within
                ));
            }
        }
        ExperimentOutput::Classify(result) => {
            let v = &result.verdict;
            lines.push(format!(
                "η = {}: trace check {} (margin {:.4e}), spectral check {} (margin {:.4e}), {} of {} rank-one probes negative",
                v.eta,
                v.trace_check.passed,
                v.trace_check.margin,
                v.spectral_check.passed,
                v.spectral_check.margin,
                v.rank_one.negative,
                v.rank_one.trials
            ));
            if let Some(sim) = &v.simulation {
                lines.push(format!("simulation: {:?} (growth ratio {:.4e})", sim.verdict, sim.growth_ratio));
            }
        }
    }
    lines.join("\n")
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let loaded = match &cli.command {
        Command::ReluProcess(c) => load(c, &[ExperimentKind::ReluProcess]),
        Command::ReluSweep(c) => load(c, &[ExperimentKind::ReluSweep]),
        Command::DiagSweep(c) => load(c, &[ExperimentKind::DiagSweep]),
        Command::DiagBalance(c) => load(c, &[ExperimentKind::DiagBalance]),
        Command::Classify(c) => load(c, &[ExperimentKind::Classify]),
        Command::VerifyEquivalence { common, family } => {
            let kinds = match family {
                Some(Family::Diag) => [ExperimentKind::VerifyDiagEquivalence, ExperimentKind::VerifyReluEquivalence],
                _ => [ExperimentKind::VerifyReluEquivalence, ExperimentKind::VerifyDiagEquivalence],
            };
            load(common, &kinds)
        }
    };
    let result = loaded.and_then(|loaded| match loaded {
        Loaded::Dump(config) => {
            let text = serde_json::to_string_pretty(&config).map_err(|e| LabError::Config(e.to_string()))?;
            Ok(text)
        }
        Loaded::Run(config, out) => {
            let output = run_experiment(&config, &out)?;
            Ok(format!("{}\nartifacts written to {}", describe(&output), out.display()))
        }
    });
    match result {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                LabError::Config(_) | LabError::Json { .. } => 2,
                _ => 1,
            })
        }
    }
}
