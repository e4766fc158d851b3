//! Named experiments, their configs, and the artifacts they write.
//!
//! Layout under the output directory: `config.json`, a summary JSON per
//! experiment, `sweep.csv` for sweeps, `runs/*.json` + `runs/*.csv` per
//! training run, and `plots/*.svg`.

pub mod config;
pub mod io;
pub mod problem;
pub mod runners;
pub mod svg;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::optim::Mode;

pub use config::{ExperimentConfig, ExperimentKind, ProblemConfig};
pub use io::{export_csv, load_run_json, save_run_json};
pub use problem::Problem;
pub use runners::{
    median, run_diag_balance, run_relu_process, run_sweep, verify_norm_equivalence, BalanceResult,
    ClassifyResult, EquivalenceResult, NamedRun, ProcessSummary, SweepResult,
};
pub use svg::{emit_svg_plot, PlotSpec, Series, SeriesStyle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "result", rename_all = "kebab-case")]
pub enum ExperimentOutput {
    Process(Vec<ProcessSummary>),
    Sweep(SweepResult),
    Balance(BalanceResult),
    Equivalence(EquivalenceResult),
    Classify(ClassifyResult),
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

/// Skips plots with nothing to draw (e.g. every run diverged).
fn plot(series: &[Series], spec: &PlotSpec, path: &Path) -> Result<()> {
    match emit_svg_plot(series, spec, path) {
        Err(LabError::Domain(_)) => Ok(()),
        other => other,
    }
}

fn write_runs(runs: &[NamedRun], norm_key: &str, dir: &Path) -> Result<()> {
    for run in runs {
        save_run_json(&run.record, &dir.join(format!("{}.json", run.name)))?;
        io::write_run_csv(&run.record, norm_key, &dir.join(format!("{}.csv", run.name)))?;
    }
    Ok(())
}

/// Runs `config` and writes every artifact under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    config.validate()?;
    let runs_dir = out_dir.join("runs");
    let plots_dir = out_dir.join("plots");
    create_dir(&runs_dir)?;
    create_dir(&plots_dir)?;
    io::write_json(config, &out_dir.join("config.json"))?;
    let norm_key = config.problem.norm_key();

    let output = match config.experiment {
        ExperimentKind::ReluProcess => {
            let (summaries, runs) = run_relu_process(config)?;
            write_runs(&runs, norm_key, &runs_dir)?;
            io::write_json(&summaries, &out_dir.join("process.json"))?;
            process_plots(&runs, &plots_dir)?;
            ExperimentOutput::Process(summaries)
        }
        ExperimentKind::ReluSweep | ExperimentKind::DiagSweep => {
            let (result, runs) = run_sweep(config)?;
            write_runs(&runs, norm_key, &runs_dir)?;
            export_csv(&result, &out_dir.join("sweep.csv"))?;
            io::write_json(&result, &out_dir.join("sweep.json"))?;
            sweep_plots(&result, &plots_dir)?;
            ExperimentOutput::Sweep(result)
        }
        ExperimentKind::DiagBalance => {
            let (result, runs) = run_diag_balance(config)?;
            write_runs(&runs, norm_key, &runs_dir)?;
            io::export_balance_csv(&result, &out_dir.join("balance.csv"))?;
            io::write_json(&result, &out_dir.join("balance.json"))?;
            balance_plots(&result, &plots_dir)?;
            ExperimentOutput::Balance(result)
        }
        ExperimentKind::VerifyReluEquivalence | ExperimentKind::VerifyDiagEquivalence => {
            let result = verify_norm_equivalence(config)?;
            io::write_json(&result, &out_dir.join("equivalence.json"))?;
            let series: Vec<Series> = result
                .ratios
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let pts = result.samples.iter().enumerate().map(|(i, s)| (i as f64, s[k])).collect();
                    Series::new(r.name.clone(), pts, SeriesStyle::Points)
                })
                .collect();
            let spec = PlotSpec::new(format!("{} sharpness / norm ratios", result.family), "draw", "ratio");
            plot(&series, &spec, &plots_dir.join("ratios.svg"))?;
            ExperimentOutput::Equivalence(result)
        }
        ExperimentKind::Classify => {
            let result = runners::run_classify(config, out_dir)?;
            io::write_json(&result, &out_dir.join("verdict.json"))?;
            ExperimentOutput::Classify(result)
        }
    };
    Ok(output)
}

fn process_plots(runs: &[NamedRun], dir: &Path) -> Result<()> {
    for run in runs {
        let r = &run.record;
        let loss: Vec<(f64, f64)> = r.loss_curve.iter().map(|l| (l.iteration as f64, l.loss)).collect();
        let clipped: Vec<(f64, f64)> = r
            .loss_curve
            .iter()
            .filter(|l| l.clipped)
            .map(|l| (l.iteration as f64, l.loss))
            .collect();
        plot(
            &[
                Series::new("training loss", loss, SeriesStyle::Line),
                Series::new("clipping active", clipped, SeriesStyle::Points),
            ],
            &PlotSpec::new("SGD with clipping", "iteration", "loss").log_y(),
            &dir.join(format!("{}-loss.svg", run.name)),
        )?;
        let trace: Vec<(f64, f64)> = r.snapshots.iter().map(|s| (s.iteration as f64, s.trace)).collect();
        let bound = 2.0 / r.config.learning_rate;
        let span = trace.first().map(|p| p.0).zip(trace.last().map(|p| p.0));
        let bound_line = span.map(|(a, b)| vec![(a, bound), (b, bound)]).unwrap_or_default();
        plot(
            &[
                Series::new("tr(G)", trace, SeriesStyle::Line),
                Series::new("2/η", bound_line, SeriesStyle::Dashed),
            ],
            &PlotSpec::new("trace of the Fisher matrix", "iteration", "tr(G)").log_y(),
            &dir.join(format!("{}-trace.svg", run.name)),
        )?;
        let path: Vec<(f64, f64)> = r
            .snapshots
            .iter()
            .filter_map(|s| Some((s.iteration as f64, *s.norms.get("path_norm")?)))
            .collect();
        plot(
            &[Series::new("path norm", path, SeriesStyle::Line)],
            &PlotSpec::new("path norm", "iteration", "‖θ‖_P"),
            &dir.join(format!("{}-path-norm.svg", run.name)),
        )?;
    }
    Ok(())
}

fn sweep_plots(result: &SweepResult, dir: &Path) -> Result<()> {
    let collect = |mode: Mode, f: &dyn Fn(&runners::SweepPoint) -> Option<f64>| -> Vec<(f64, f64)> {
        result
            .points_for(mode)
            .filter_map(|p| Some((p.learning_rate, f(p)?)))
            .collect()
    };
    for mode in [Mode::Sgd, Mode::Gd] {
        let name = runners::mode_name(mode);
        let bound: Vec<(f64, f64)> = result.points_for(mode).map(|p| (p.learning_rate, 2.0 / p.learning_rate)).collect();
        let series = [
            Series::new("tr(G)", collect(mode, &|p| p.median_trace), SeriesStyle::LinePoints),
            Series::new("‖G‖_F", collect(mode, &|p| p.median_frobenius), SeriesStyle::LinePoints),
            Series::new("‖G‖₂", collect(mode, &|p| p.median_spectral), SeriesStyle::LinePoints),
            Series::new("2/η", bound, SeriesStyle::Dashed),
        ];
        plot(
            &series,
            &PlotSpec::new(format!("{} sharpness vs learning rate", name.to_uppercase()), "learning rate", "median over seeds")
                .log_x()
                .log_y(),
            &dir.join(format!("sharpness-{name}.svg")),
        )?;
    }
    let both = |f: &dyn Fn(&runners::SweepPoint) -> Option<f64>| {
        [
            Series::new("SGD", collect(Mode::Sgd, f), SeriesStyle::LinePoints),
            Series::new("GD", collect(Mode::Gd, f), SeriesStyle::LinePoints),
        ]
    };
    plot(
        &both(&|p| p.median_norm),
        &PlotSpec::new(format!("{} vs learning rate", result.norm_key), "learning rate", &result.norm_key)
            .log_x()
            .log_y(),
        &dir.join("norm.svg"),
    )?;
    plot(
        &both(&|p| p.median_test_risk),
        &PlotSpec::new("test risk vs learning rate", "learning rate", "test risk").log_x().log_y(),
        &dir.join("test-risk.svg"),
    )
}

fn balance_plots(result: &BalanceResult, dir: &Path) -> Result<()> {
    let mut r0s: Vec<f64> = result.rows.iter().map(|r| r.r0).collect();
    r0s.sort_by(f64::total_cmp);
    r0s.dedup();
    for (file, pick) in [
        ("balance.svg", (|r: &runners::BalanceRow| r.final_balancedness) as fn(&runners::BalanceRow) -> Option<f64>),
        ("balance-l2.svg", |r: &runners::BalanceRow| r.final_balancedness_l2),
    ] {
        let series: Vec<Series> = [Mode::Sgd, Mode::Gd]
            .iter()
            .map(|&mode| {
                let pts = r0s
                    .iter()
                    .filter_map(|&r0| {
                        let m = median(result.rows.iter().filter(|r| r.mode == mode && r.r0 == r0).filter_map(pick))?;
                        Some((r0, m))
                    })
                    .collect();
                Series::new(runners::mode_name(mode).to_uppercase(), pts, SeriesStyle::LinePoints)
            })
            .collect();
        plot(
            &series,
            &PlotSpec::new("unbalancedness at convergence", "r0", "final r(θ)").log_x(),
            &dir.join(file),
        )?;
    }
    Ok(())
}
