//! The experiments themselves. Each runner is a pure function of its config
//! and seeds; files are written by the caller in a fixed order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fisher::{fisher_kernel, spectral_norm_psd};
use crate::models::{DiagNet, Model, ModelParams, ReluNet};
use crate::numerics::{Matrix, RngStream};
use crate::optim::{train, Mode, RunRecord, RunStatus};
use crate::stability::{classify_minimum, ClassifyOptions, StabilityVerdict};

use super::config::{
    log_grid, AutoGrid, ExperimentConfig, ExperimentKind, ProblemConfig, RatioBounds,
    TrainSettings, VerdictSettings,
};
use super::problem::{Problem, STREAM_DRAWS};

pub(crate) fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Sgd => "sgd",
        Mode::Gd => "gd",
    }
}

fn status_name(status: &RunStatus) -> &'static str {
    match status {
        RunStatus::Converged => "converged",
        RunStatus::MaxIters => "max-iters",
        RunStatus::Diverged { .. } => "diverged",
    }
}

/// Median of the finite values, `None` if there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub lr_index: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub converged: bool,
    pub iterations: u64,
    pub clip_count: u64,
    pub final_loss: Option<f64>,
    pub test_risk: Option<f64>,
    pub trace: Option<f64>,
    pub frobenius: Option<f64>,
    pub spectral: Option<f64>,
    pub alignment: Option<f64>,
    /// Path norm or `‖β‖₁`.
    pub norm: Option<f64>,
    pub balancedness: Option<f64>,
    /// Stability checks, for converged runs.
    pub verdict: Option<StabilityVerdict>,
    pub run_file: String,
}

impl SweepRow {
    pub fn mode_name(&self) -> &'static str {
        mode_name(self.mode)
    }

    pub fn status_name(&self) -> &'static str {
        status_name(&self.status)
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Medians across seeds at one grid point, over runs that did not diverge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mode: Mode,
    pub lr_index: usize,
    pub learning_rate: f64,
    pub runs: usize,
    pub converged: usize,
    pub diverged: usize,
    pub median_trace: Option<f64>,
    pub median_frobenius: Option<f64>,
    pub median_spectral: Option<f64>,
    pub median_norm: Option<f64>,
    pub median_test_risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub experiment: ExperimentKind,
    pub norm_key: String,
    pub sgd_grid: Vec<f64>,
    pub gd_grid: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn points_for(&self, mode: Mode) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(move |p| p.mode == mode)
    }

    pub fn rows_for(&self, mode: Mode) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }
}

/// A finished run with the file stem it is stored under.
#[derive(Debug, Clone)]
pub struct NamedRun {
    pub name: String,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSummary {
    pub seed: u64,
    pub learning_rate: f64,
    pub clip_threshold: Option<f64>,
    pub status: RunStatus,
    pub converged: bool,
    pub iterations: u64,
    pub final_loss: Option<f64>,
    pub test_risk: Option<f64>,
    pub final_trace: Option<f64>,
    pub final_path_norm: Option<f64>,
    pub two_over_eta: f64,
    pub clip_count: u64,
    pub last_clip_iteration: Option<u64>,
    /// First iteration of the final 10% of the run.
    pub tail_start: u64,
    /// No clipping fired at or after `tail_start`.
    pub clip_free_tail: bool,
    pub run_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub r0: f64,
    pub seed: u64,
    pub mode: Mode,
    pub learning_rate: f64,
    pub status: RunStatus,
    pub converged: bool,
    pub iterations: u64,
    pub init_balancedness: f64,
    pub init_balancedness_l2: f64,
    pub final_balancedness: Option<f64>,
    pub final_balancedness_l2: Option<f64>,
    pub test_risk: Option<f64>,
    pub run_file: String,
}

impl BalanceRow {
    pub fn mode_name(&self) -> &'static str {
        mode_name(self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub name: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub lo: f64,
    pub hi: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub family: String,
    pub n: usize,
    pub input_dim: usize,
    pub num_params: usize,
    pub draws: usize,
    pub ratios: Vec<RatioStats>,
    /// Per-draw ratios, in the order of `ratios`.
    pub samples: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl EquivalenceResult {
    pub fn all_within(&self) -> bool {
        self.ratios.iter().all(|r| r.within)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    /// As given in the config, so the result does not depend on `out_dir`.
    pub run_file: PathBuf,
    pub verdict: StabilityVerdict,
}

fn build_problems(config: &ExperimentConfig) -> Result<Vec<Problem>> {
    config
        .seeds
        .par_iter()
        .map(|&seed| Problem::build(&config.problem, seed))
        .collect()
}

fn run_training(
    problem: &Problem,
    init: &ModelParams,
    train_settings: &TrainSettings,
    mode: Mode,
    lr: f64,
) -> Result<RunRecord> {
    let config = train_settings.opt_config(mode, lr, problem.seed);
    train(init, &problem.train, &config, problem.test.as_ref(), &mut problem.sgd_stream())
}

/// `relu-process`: one clipped SGD run per seed with dense snapshots.
pub fn run_relu_process(config: &ExperimentConfig) -> Result<(Vec<ProcessSummary>, Vec<NamedRun>)> {
    let lr = *config
        .lr_grid
        .first()
        .ok_or_else(|| LabError::Config("relu-process needs a learning rate".into()))?;
    let problems = build_problems(config)?;
    let runs: Vec<NamedRun> = problems
        .par_iter()
        .map(|p| {
            Ok(NamedRun {
                name: format!("sgd-process-seed{}", p.seed),
                record: run_training(p, &p.init, &config.train, Mode::Sgd, lr)?,
            })
        })
        .collect::<Result<_>>()?;
    let summaries = runs
        .iter()
        .zip(&problems)
        .map(|(run, p)| process_summary(&run.record, p.seed, &run.name))
        .collect();
    Ok((summaries, runs))
}

pub fn process_summary(record: &RunRecord, seed: u64, name: &str) -> ProcessSummary {
    let t = record.iterations;
    // Iterations are 0-based; the tail holds the last ⌈t/10⌉ of them.
    let tail_start = t - t.div_ceil(10);
    let last = record.snapshots.last().filter(|s| s.iteration == t);
    ProcessSummary {
        seed,
        learning_rate: record.config.learning_rate,
        clip_threshold: record.config.clip_threshold,
        status: record.status,
        converged: record.converged,
        iterations: t,
        final_loss: record.final_loss,
        test_risk: record.test_risk,
        final_trace: last.map(|s| s.trace),
        final_path_norm: last.and_then(|s| s.norms.get("path_norm").copied()),
        two_over_eta: 2.0 / record.config.learning_rate,
        clip_count: record.clip_count,
        last_clip_iteration: record.last_clip_iteration,
        tail_start,
        clip_free_tail: record.last_clip_iteration.map_or(true, |c| c < tail_start),
        run_file: format!("runs/{name}.json"),
    }
}

/// Largest rate in `[lo, hi]` whose pilot run converges, by bisection in
/// log space; the grid then reaches `decades` below it.
pub fn auto_grid(problem: &Problem, train_settings: &TrainSettings, mode: Mode, auto: &AutoGrid) -> Result<Vec<f64>> {
    let converges = |lr: f64| -> Result<bool> {
        let mut settings = train_settings.clone();
        settings.final_spectrum = false;
        Ok(run_training(problem, &problem.init, &settings, mode, lr)?.converged)
    };
    let top = if converges(auto.hi)? {
        auto.hi
    } else if !converges(auto.lo)? {
        return Err(LabError::Config(format!(
            "no {} learning rate in [{}, {}] converges",
            mode_name(mode),
            auto.lo,
            auto.hi
        )));
    } else {
        let (mut lo, mut hi) = (auto.lo, auto.hi);
        for _ in 0..auto.bisection_steps {
            let mid = (lo * hi).sqrt();
            if converges(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(log_grid(top * 10f64.powf(-auto.decades), top, auto.points.max(1)))
}

fn resolve_grids(config: &ExperimentConfig, problems: &[Problem]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(auto) = config.auto_grid.as_ref().filter(|_| config.lr_grid.is_empty()) else {
        return Ok(config.grids());
    };
    let pilot = &problems[0];
    let gd = auto_grid(pilot, &config.train, Mode::Gd, auto)?;
    if config.fair_comparison {
        let s = (config.problem.input_dim() as f64).sqrt();
        return Ok((gd.iter().map(|l| l / s).collect(), gd));
    }
    Ok((auto_grid(pilot, &config.train, Mode::Sgd, auto)?, gd))
}

fn verdict_for(
    record: &RunRecord,
    problem: &Problem,
    eta: f64,
    settings: &VerdictSettings,
) -> Result<Option<StabilityVerdict>> {
    let Some(params) = record.final_params.as_ref().filter(|_| record.converged) else {
        return Ok(None);
    };
    let options = ClassifyOptions {
        loss_tol: record.config.loss_tol,
        force: false,
        mu0: None,
        n_probes: settings.n_probes,
        probe_seed: problem.seed,
        simulation: settings.simulation,
    };
    classify_minimum(params, &problem.train, eta, &options).map(Some)
}

fn sweep_row(
    record: &RunRecord,
    problem: &Problem,
    lr_index: usize,
    norm_key: &str,
    settings: &VerdictSettings,
    name: &str,
) -> Result<SweepRow> {
    let last = record
        .snapshots
        .last()
        .filter(|s| s.iteration == record.iterations && record.final_params.is_some());
    Ok(SweepRow {
        mode: record.config.mode,
        lr_index,
        learning_rate: record.config.learning_rate,
        seed: problem.seed,
        status: record.status,
        converged: record.converged,
        iterations: record.iterations,
        clip_count: record.clip_count,
        final_loss: record.final_loss,
        test_risk: record.test_risk,
        trace: last.map(|s| s.trace),
        frobenius: last.map(|s| s.frobenius),
        spectral: last.map(|s| s.spectral),
        alignment: last.and_then(|s| s.alignment),
        norm: last.and_then(|s| s.norms.get(norm_key).copied()),
        balancedness: last.and_then(|s| s.norms.get("balancedness").copied()),
        verdict: verdict_for(record, problem, record.config.learning_rate, settings)?,
        run_file: format!("runs/{name}.json"),
    })
}

fn aggregate(rows: &[SweepRow], mode: Mode, grid: &[f64]) -> Vec<SweepPoint> {
    grid.iter()
        .enumerate()
        .map(|(i, &lr)| {
            let at: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode && r.lr_index == i).collect();
            let live = || at.iter().filter(|r| !r.diverged());
            SweepPoint {
                mode,
                lr_index: i,
                learning_rate: lr,
                runs: at.len(),
                converged: at.iter().filter(|r| r.converged).count(),
                diverged: at.iter().filter(|r| r.diverged()).count(),
                median_trace: median(live().filter_map(|r| r.trace)),
                median_frobenius: median(live().filter_map(|r| r.frobenius)),
                median_spectral: median(live().filter_map(|r| r.spectral)),
                median_norm: median(live().filter_map(|r| r.norm)),
                median_test_risk: median(live().filter_map(|r| r.test_risk)),
            }
        })
        .collect()
}

/// `relu-sweep` and `diag-sweep`: SGD and GD over their grids and seeds.
pub fn run_sweep(config: &ExperimentConfig) -> Result<(SweepResult, Vec<NamedRun>)> {
    let problems = build_problems(config)?;
    let (sgd_grid, gd_grid) = resolve_grids(config, &problems)?;
    let norm_key = config.problem.norm_key();

    let mut jobs = Vec::new();
    for (mode, grid) in [(Mode::Sgd, &sgd_grid), (Mode::Gd, &gd_grid)] {
        for (i, &lr) in grid.iter().enumerate() {
            for p in &problems {
                jobs.push((mode, i, lr, p));
            }
        }
    }
    let done: Vec<(SweepRow, NamedRun)> = jobs
        .par_iter()
        .map(|&(mode, i, lr, p)| {
            let name = format!("{}-lr{i:02}-seed{}", mode_name(mode), p.seed);
            let record = run_training(p, &p.init, &config.train, mode, lr)?;
            let row = sweep_row(&record, p, i, norm_key, &config.verdict, &name)?;
            Ok((row, NamedRun { name, record }))
        })
        .collect::<Result<_>>()?;
    let (rows, runs): (Vec<SweepRow>, Vec<NamedRun>) = done.into_iter().unzip();
    let mut points = aggregate(&rows, Mode::Sgd, &sgd_grid);
    points.extend(aggregate(&rows, Mode::Gd, &gd_grid));
    Ok((
        SweepResult {
            experiment: config.experiment,
            norm_key: norm_key.into(),
            sgd_grid,
            gd_grid,
            rows,
            points,
        },
        runs,
    ))
}

/// `diag-balance`: SGD and GD from inits with `Var(b)/Var(a) = r₀`.
pub fn run_diag_balance(config: &ExperimentConfig) -> Result<(BalanceResult, Vec<NamedRun>)> {
    let settings = config
        .balance
        .as_ref()
        .ok_or_else(|| LabError::Config("diag-balance needs balance settings".into()))?;
    let ProblemConfig::Diag(problem_config) = &config.problem else {
        return Err(LabError::Config("diag-balance needs a diagonal problem".into()));
    };
    let problems = build_problems(config)?;
    let mut jobs = Vec::new();
    for (ri, &r0) in settings.r0_grid.iter().enumerate() {
        for p in &problems {
            for (mode, lr) in [(Mode::Sgd, settings.sgd_lr), (Mode::Gd, settings.gd_lr)] {
                jobs.push((ri, r0, p, mode, lr));
            }
        }
    }
    let v = settings.base_variance;
    let done: Vec<(BalanceRow, NamedRun)> = jobs
        .par_iter()
        .map(|&(ri, r0, p, mode, lr)| {
            let init = p.diag_init(problem_config.input_dim, v, v * r0)?;
            let record = run_training(p, &init, &config.train, mode, lr)?;
            let name = format!("{}-r{ri:02}-seed{}", mode_name(mode), p.seed);
            let final_norms = record.final_params.as_ref().map(|m| m.norms());
            let init_norms = &record.init_norms;
            let get = |key: &str| final_norms.as_ref().and_then(|n| n.get(key).copied());
            let row = BalanceRow {
                r0,
                seed: p.seed,
                mode,
                learning_rate: lr,
                status: record.status,
                converged: record.converged,
                iterations: record.iterations,
                init_balancedness: init_norms.get("balancedness").copied().unwrap_or(f64::NAN),
                init_balancedness_l2: init_norms.get("balancedness_l2").copied().unwrap_or(f64::NAN),
                final_balancedness: get("balancedness"),
                final_balancedness_l2: get("balancedness_l2"),
                test_risk: record.test_risk,
                run_file: format!("runs/{name}.json"),
            };
            Ok((row, NamedRun { name, record }))
        })
        .collect::<Result<_>>()?;
    let (rows, runs) = done.into_iter().unzip();
    Ok((BalanceResult { rows }, runs))
}

/// Smallest `n` with `d·ln(n/δ)/n ≤ 1`.
pub fn sample_size_scale(d: usize, delta: f64) -> usize {
    let d = d as f64;
    let mut n = 1usize;
    while d * (n as f64 / delta).ln() / n as f64 > 1.0 {
        n += 1;
    }
    n
}

fn scaled_gaussians(stream: &mut RngStream, len: usize, std: f64, spread: f64) -> Result<Vec<f64>> {
    let scale = 10f64.powf(spread * (stream.uniform(1, -0.5, 0.5)?[0]));
    Ok(stream.gaussian(len)?.into_iter().map(|z| z * std * scale).collect())
}

fn random_params(problem: &ProblemConfig, stream: &mut RngStream, spread: f64) -> Result<ModelParams> {
    match problem {
        ProblemConfig::Relu(p) => {
            let (m, d) = (p.width, p.input_dim);
            let mut a = Vec::with_capacity(m);
            let mut w = Vec::with_capacity(m * d);
            for _ in 0..m {
                a.push(scaled_gaussians(stream, 1, 1.0, spread)?[0]);
                w.extend(scaled_gaussians(stream, d, 1.0 / (d as f64).sqrt(), spread)?);
            }
            Ok(ModelParams::Relu(ReluNet::new(a, Matrix::from_vec(m, d, w)?)?))
        }
        ProblemConfig::Diag(p) => {
            let mut a = Vec::with_capacity(p.input_dim);
            let mut b = Vec::with_capacity(p.input_dim);
            for _ in 0..p.input_dim {
                a.push(scaled_gaussians(stream, 1, 1.0, spread)?[0]);
                b.push(scaled_gaussians(stream, 1, 1.0, spread)?[0]);
            }
            Ok(ModelParams::Diag(DiagNet::shallow(a, b)?))
        }
    }
}

fn ratio_value(name: &str, trace: f64, frobenius: f64, spectral: f64, params: &ModelParams) -> Result<f64> {
    let (metric, norm) = name
        .split_once('/')
        .ok_or_else(|| LabError::Config(format!("ratio name {name:?} is not metric/norm")))?;
    let num = match metric {
        "trace" => trace,
        "frobenius" => frobenius,
        "spectral" => spectral,
        other => return Err(LabError::Config(format!("unknown metric {other:?}"))),
    };
    let den = params
        .norms()
        .get(norm)
        .copied()
        .ok_or_else(|| LabError::Config(format!("unknown norm {norm:?}")))?;
    if den <= 0.0 {
        return Err(LabError::UndefinedRatio("norm of a zero parameter draw"));
    }
    Ok(num / den)
}

/// Fisher metric / parameter norm ratios over random parameter draws.
pub fn verify_norm_equivalence(config: &ExperimentConfig) -> Result<EquivalenceResult> {
    let settings = config
        .equivalence
        .as_ref()
        .ok_or_else(|| LabError::Config("equivalence settings required".into()))?;
    let seed = config.seeds[0];
    let problem = Problem::build(&config.problem, seed)?;
    let (n, d) = (problem.train.len(), problem.train.dim());

    let mut warnings = Vec::new();
    let family = match &config.problem {
        ProblemConfig::Relu(_) => {
            let scale = sample_size_scale(d, 0.1);
            if n < scale {
                warnings.push(format!("n = {n} below N(d, 0.1) = {scale}; trace and Frobenius ratios may be loose"));
            }
            if n < d * scale {
                warnings.push(format!("n = {n} below d·N(d, 0.1) = {}; spectral ratio may be loose", d * scale));
            }
            "relu"
        }
        ProblemConfig::Diag(_) => {
            if (n as f64) < 10.0 * (d as f64).ln().max(1.0) {
                warnings.push(format!("n = {n} is not large compared with log d"));
            }
            "diag"
        }
    };

    let mut stream = RngStream::new(seed, STREAM_DRAWS);
    let draws: Vec<ModelParams> = (0..settings.draws)
        .map(|_| random_params(&config.problem, &mut stream, settings.scale_spread))
        .collect::<Result<_>>()?;
    let samples: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|params| {
            let kernel = fisher_kernel(params, &problem.train)?;
            let (tr, fro, spec) = (kernel.trace(), kernel.frobenius(), spectral_norm_psd(&kernel)?);
            settings
                .bounds
                .iter()
                .map(|b| ratio_value(&b.name, tr, fro, spec, params))
                .collect()
        })
        .collect::<Result<_>>()?;

    let ratios = settings
        .bounds
        .iter()
        .enumerate()
        .map(|(k, RatioBounds { name, lo, hi })| {
            let col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            RatioStats {
                name: name.clone(),
                min,
                median: median(col.iter().copied()).unwrap_or(f64::NAN),
                max,
                lo: *lo,
                hi: *hi,
                within: min >= *lo && max <= *hi,
            }
        })
        .collect();

    Ok(EquivalenceResult {
        family: family.into(),
        n,
        input_dim: d,
        num_params: draws.first().map_or(0, |p| p.num_params()),
        draws: settings.draws,
        ratios,
        samples,
        warnings,
    })
}

/// `classify`: stability checks at the final parameters of a saved run.
pub fn run_classify(config: &ExperimentConfig, out_dir: &Path) -> Result<ClassifyResult> {
    let settings = config
        .classify
        .as_ref()
        .ok_or_else(|| LabError::Config("classify settings required".into()))?;
    let path = if settings.run_file.is_absolute() {
        settings.run_file.clone()
    } else {
        out_dir.join(&settings.run_file)
    };
    let record = super::io::load_run_json(&path)?;
    let params = record
        .final_params
        .as_ref()
        .ok_or_else(|| LabError::Config(format!("{} has no final parameters", path.display())))?;
    let problem = Problem::build(&config.problem, config.seeds[0])?;
    let eta = settings.eta.unwrap_or(record.config.learning_rate);
    let options = ClassifyOptions {
        loss_tol: config.train.loss_tol,
        force: settings.force,
        mu0: None,
        n_probes: settings.verdict.n_probes,
        probe_seed: problem.seed,
        simulation: settings.verdict.simulation,
    };
    Ok(ClassifyResult {
        run_file: settings.run_file.clone(),
        verdict: classify_minimum(params, &problem.train, eta, &options)?,
    })
}
