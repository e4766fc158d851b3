//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_N_TEST, InputDistribution};
use crate::error::{LabError, Result};
use crate::optim::{Mode, OptConfig};
use crate::stability::SimulationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ReluProcess,
    ReluSweep,
    DiagSweep,
    DiagBalance,
    VerifyReluEquivalence,
    VerifyDiagEquivalence,
    Classify,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::ReluProcess,
        ExperimentKind::ReluSweep,
        ExperimentKind::DiagSweep,
        ExperimentKind::DiagBalance,
        ExperimentKind::VerifyReluEquivalence,
        ExperimentKind::VerifyDiagEquivalence,
        ExperimentKind::Classify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ReluProcess => "relu-process",
            ExperimentKind::ReluSweep => "relu-sweep",
            ExperimentKind::DiagSweep => "diag-sweep",
            ExperimentKind::DiagBalance => "diag-balance",
            ExperimentKind::VerifyReluEquivalence => "verify-relu-equivalence",
            ExperimentKind::VerifyDiagEquivalence => "verify-diag-equivalence",
            ExperimentKind::Classify => "classify",
        }
    }
}

/// Two-layer ReLU student fitted to a sum-of-ReLUs teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluProblem {
    /// Number of teacher neurons `k`.
    pub teacher_width: usize,
    pub input_dim: usize,
    /// Student width `m`.
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub distribution: InputDistribution,
}

/// Diagonal linear network fitted to a sparse linear teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagProblem {
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// `β*` has this many leading ones.
    pub support: usize,
    pub distribution: InputDistribution,
    pub init_var_a: f64,
    pub init_var_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProblemConfig {
    Relu(ReluProblem),
    Diag(DiagProblem),
}

impl ProblemConfig {
    pub fn relu_default() -> Self {
        ProblemConfig::Relu(ReluProblem {
            teacher_width: 10,
            input_dim: 100,
            width: 100,
            n_train: 300,
            n_test: DEFAULT_N_TEST,
            distribution: InputDistribution::Sphere,
        })
    }

    pub fn diag_default() -> Self {
        ProblemConfig::Diag(DiagProblem {
            input_dim: 1000,
            n_train: 300,
            n_test: DEFAULT_N_TEST,
            support: 3,
            distribution: InputDistribution::Cube,
            init_var_a: 1.0,
            init_var_b: 1.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ProblemConfig::Relu(p) => p.input_dim,
            ProblemConfig::Diag(p) => p.input_dim,
        }
    }

    pub fn n_train(&self) -> usize {
        match self {
            ProblemConfig::Relu(p) => p.n_train,
            ProblemConfig::Diag(p) => p.n_train,
        }
    }

    /// Norm reported next to the sharpness: path norm or `‖β‖₁`.
    pub fn norm_key(&self) -> &'static str {
        match self {
            ProblemConfig::Relu(_) => "path_norm",
            ProblemConfig::Diag(_) => "beta_l1",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            ProblemConfig::Relu(p) => {
                p.teacher_width > 0 && p.input_dim > 0 && p.width > 0 && p.n_train > 0
            }
            ProblemConfig::Diag(p) => {
                p.input_dim > 0
                    && p.n_train > 0
                    && p.support <= p.input_dim
                    && p.init_var_a >= 0.0
                    && p.init_var_b >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("invalid problem sizes: {self:?}")))
        }
    }
}

/// Budget and bookkeeping for one optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSettings {
    pub max_iters: u64,
    pub metric_period: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_period: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// `None` disables clipping.
    pub clip_threshold: Option<f64>,
    pub loss_tol: f64,
    pub sgd: ModeSettings,
    pub gd: ModeSettings,
    /// Full Fisher spectrum in the final snapshot of each run.
    #[serde(default = "default_true")]
    pub final_spectrum: bool,
}

fn default_true() -> bool {
    true
}

impl TrainSettings {
    pub fn opt_config(&self, mode: Mode, learning_rate: f64, seed: u64) -> OptConfig {
        let m = match mode {
            Mode::Sgd => &self.sgd,
            Mode::Gd => &self.gd,
        };
        OptConfig {
            learning_rate,
            mode,
            clip_threshold: self.clip_threshold,
            max_iters: m.max_iters,
            loss_tol: self.loss_tol,
            metric_period: m.metric_period,
            loss_period: m.loss_period,
            final_spectrum: self.final_spectrum,
            seed,
        }
    }
}

/// Pilot search for the largest learning rate that still converges, followed
/// by a log-spaced grid reaching `decades` below it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoGrid {
    pub lo: f64,
    pub hi: f64,
    pub bisection_steps: usize,
    pub decades: f64,
    pub points: usize,
}

/// Stability checks run on every converged minimum of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictSettings {
    pub n_probes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
}

impl Default for VerdictSettings {
    fn default() -> Self {
        Self {
            n_probes: 200,
            simulation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSettings {
    pub r0_grid: Vec<f64>,
    /// `a ~ N(0, v)`, `b ~ N(0, v·r₀)`.
    pub base_variance: f64,
    pub sgd_lr: f64,
    pub gd_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceSettings {
    pub draws: usize,
    /// Per-unit parameter scales are `10^u` with `u ~ Unif(−s/2, s/2)`.
    pub scale_spread: f64,
    pub bounds: Vec<RatioBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifySettings {
    /// Saved run whose final parameters are classified; relative paths are
    /// resolved against the output directory.
    pub run_file: PathBuf,
    /// Learning rate to test; defaults to the run's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub verdict: VerdictSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub problem: ProblemConfig,
    pub train: TrainSettings,
    /// Learning rates, strictly increasing. With `fair_comparison` these are
    /// GD rates and SGD runs at `η/√d`; otherwise they are SGD rates.
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    /// GD rates when they differ from `lr_grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd_lr_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub fair_comparison: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_grid: Option<AutoGrid>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub verdict: VerdictSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifySettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Frozen `[1/C, C]` intervals for random ReLU parameters at d = 20, m = 30,
/// n = 4000. `C` is 1.25× the widest ratio seen over 100 calibration draws
/// (seeds 1000 and 1001), rounded up to a half.
pub const RELU_RATIO_CONSTANTS: [(&str, f64); 3] = [
    ("trace/l2q_d", 3.0),
    ("frobenius/l2q_sqrt_d", 6.0),
    ("spectral/l2q_1", 6.5),
];

pub fn relu_equivalence_bounds() -> Vec<RatioBounds> {
    RELU_RATIO_CONSTANTS
        .iter()
        .map(|&(name, c)| RatioBounds { name: name.into(), lo: 1.0 / c, hi: c })
        .collect()
}

pub fn diag_equivalence_bounds() -> Vec<RatioBounds> {
    vec![
        RatioBounds { name: "spectral/alpha_linf".into(), lo: 0.9, hi: 1.1 },
        RatioBounds { name: "trace/alpha_l1".into(), lo: 0.95, hi: 1.05 },
        RatioBounds { name: "frobenius/alpha_l2".into(), lo: 0.9, hi: 1.1 },
    ]
}

impl ExperimentConfig {
    /// The shipped default for each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let relu_train = |clip: f64| TrainSettings {
            clip_threshold: Some(clip),
            loss_tol: 1e-8,
            sgd: ModeSettings { max_iters: 200_000, metric_period: 10_000, loss_period: None },
            gd: ModeSettings { max_iters: 20_000, metric_period: 100, loss_period: None },
            final_spectrum: true,
        };
        let diag_train = TrainSettings {
            clip_threshold: Some(1.0),
            loss_tol: 1e-8,
            sgd: ModeSettings { max_iters: 300_000, metric_period: 50_000, loss_period: Some(1000) },
            gd: ModeSettings { max_iters: 100_000, metric_period: 1000, loss_period: None },
            final_spectrum: true,
        };
        let base = ExperimentConfig {
            experiment: kind,
            problem: ProblemConfig::relu_default(),
            train: relu_train(100.0),
            lr_grid: Vec::new(),
            gd_lr_grid: None,
            fair_comparison: false,
            auto_grid: None,
            seeds: vec![0, 1, 2],
            verdict: VerdictSettings::default(),
            balance: None,
            equivalence: None,
            classify: None,
            out_dir: None,
        };
        match kind {
            ExperimentKind::ReluProcess => {
                let mut train = relu_train(1.0);
                train.sgd.metric_period = 1000;
                ExperimentConfig {
                    train,
                    lr_grid: vec![0.1],
                    seeds: vec![0],
                    ..base
                }
            }
            ExperimentKind::ReluSweep => ExperimentConfig {
                lr_grid: log_grid(0.002, 0.064, 8),
                fair_comparison: true,
                ..base
            },
            ExperimentKind::DiagSweep => ExperimentConfig {
                problem: ProblemConfig::diag_default(),
                train: diag_train,
                lr_grid: log_grid(0.12, 0.8, 8),
                gd_lr_grid: Some(log_grid(0.003, 0.3, 8)),
                ..base
            },
            ExperimentKind::DiagBalance => ExperimentConfig {
                problem: ProblemConfig::diag_default(),
                train: diag_train,
                balance: Some(BalanceSettings {
                    r0_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0],
                    base_variance: 0.1,
                    sgd_lr: 0.5,
                    gd_lr: 0.1,
                }),
                ..base
            },
            ExperimentKind::VerifyReluEquivalence => ExperimentConfig {
                problem: ProblemConfig::Relu(ReluProblem {
                    teacher_width: 10,
                    input_dim: 20,
                    width: 30,
                    n_train: 4000,
                    n_test: 0,
                    distribution: InputDistribution::Sphere,
                }),
                seeds: vec![0],
                equivalence: Some(EquivalenceSettings {
                    draws: 50,
                    scale_spread: 2.0,
                    bounds: relu_equivalence_bounds(),
                }),
                ..base
            },
            ExperimentKind::VerifyDiagEquivalence => ExperimentConfig {
                problem: ProblemConfig::Diag(DiagProblem {
                    input_dim: 20,
                    n_train: 20_000,
                    n_test: 0,
                    support: 3,
                    distribution: InputDistribution::Sphere,
                    init_var_a: 1.0,
                    init_var_b: 1.0,
                }),
                seeds: vec![0],
                equivalence: Some(EquivalenceSettings {
                    draws: 50,
                    scale_spread: 2.0,
                    bounds: diag_equivalence_bounds(),
                }),
                ..base
            },
            ExperimentKind::Classify => ExperimentConfig {
                seeds: vec![0],
                classify: Some(ClassifySettings {
                    run_file: PathBuf::from("runs/sgd-lr00-seed0.json"),
                    eta: None,
                    force: false,
                    verdict: VerdictSettings {
                        n_probes: 200,
                        simulation: Some(SimulationConfig::new(0.0)),
                    },
                }),
                ..base
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        let increasing = |g: &[f64]| {
            g.iter().all(|v| *v > 0.0 && v.is_finite()) && g.windows(2).all(|w| w[0] < w[1])
        };
        if !increasing(&self.lr_grid) {
            return Err(LabError::Config("lr_grid must be positive and strictly increasing".into()));
        }
        if let Some(g) = &self.gd_lr_grid {
            if !increasing(g) {
                return Err(LabError::Config(
                    "gd_lr_grid must be positive and strictly increasing".into(),
                ));
            }
        }
        if self.fair_comparison && self.gd_lr_grid.is_some() {
            return Err(LabError::Config(
                "fair_comparison derives the SGD grid; drop gd_lr_grid".into(),
            ));
        }
        let family_ok = match (self.experiment, &self.problem) {
            (
                ExperimentKind::ReluProcess
                | ExperimentKind::ReluSweep
                | ExperimentKind::VerifyReluEquivalence,
                ProblemConfig::Relu(_),
            ) => true,
            (
                ExperimentKind::DiagSweep
                | ExperimentKind::DiagBalance
                | ExperimentKind::VerifyDiagEquivalence,
                ProblemConfig::Diag(_),
            ) => true,
            (ExperimentKind::Classify, _) => true,
            _ => false,
        };
        if !family_ok {
            return Err(LabError::Config(format!(
                "{} does not apply to this model family",
                self.experiment.name()
            )));
        }
        match self.experiment {
            ExperimentKind::ReluProcess if self.lr_grid.is_empty() => {
                Err(LabError::Config("relu-process needs a learning rate in lr_grid".into()))
            }
            ExperimentKind::ReluSweep | ExperimentKind::DiagSweep
                if self.lr_grid.is_empty() && self.auto_grid.is_none() =>
            {
                Err(LabError::Config("sweeps need lr_grid or auto_grid".into()))
            }
            ExperimentKind::DiagBalance => match &self.balance {
                Some(b) if !b.r0_grid.is_empty() && b.r0_grid.iter().all(|r| *r >= 1.0) => Ok(()),
                _ => Err(LabError::Config("diag-balance needs an r0_grid with r0 >= 1".into())),
            },
            ExperimentKind::VerifyReluEquivalence | ExperimentKind::VerifyDiagEquivalence => {
                match &self.equivalence {
                    Some(e) if e.draws > 0 => Ok(()),
                    _ => Err(LabError::Config("equivalence settings with draws >= 1 required".into())),
                }
            }
            ExperimentKind::Classify if self.classify.is_none() => {
                Err(LabError::Config("classify settings required".into()))
            }
            _ => Ok(()),
        }
    }

    /// SGD and GD learning-rate grids after applying `fair_comparison`.
    pub fn grids(&self) -> (Vec<f64>, Vec<f64>) {
        if self.fair_comparison {
            let s = (self.problem.input_dim() as f64).sqrt();
            (self.lr_grid.iter().map(|l| l / s).collect(), self.lr_grid.clone())
        } else {
            let gd = self.gd_lr_grid.clone().unwrap_or_else(|| self.lr_grid.clone());
            (self.lr_grid.clone(), gd)
        }
    }
}
