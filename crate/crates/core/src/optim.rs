//! SGD (batch size 1) and GD with optional gradient-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::fisher::{sharpness_report, SharpnessReport};
use crate::models::{DiagNet, Model, ModelParams, ReluNet};
use crate::numerics::{axpy, norm2, Matrix, RngStream};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One sample per step, drawn uniformly with replacement.
    Sgd,
    /// Full-batch gradient.
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub mode: Mode,
    /// Clipping threshold `δ`; `None` disables clipping.
    pub clip_threshold: Option<f64>,
    pub max_iters: u64,
    pub loss_tol: f64,
    /// A sharpness snapshot is taken every `metric_period` iterations.
    pub metric_period: u64,
    /// Spacing of the recorded loss curve. Defaults to every step for GD and
    /// to `metric_period` for SGD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_period: Option<u64>,
    /// Compute the full Fisher spectrum for the final snapshot.
    #[serde(default = "default_true")]
    pub final_spectrum: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl OptConfig {
    pub fn new(mode: Mode, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            mode,
            clip_threshold: None,
            max_iters: 100_000,
            loss_tol: 1e-8,
            metric_period: 1000,
            loss_period: None,
            final_spectrum: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(LabError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.loss_tol > 0.0) {
            return Err(LabError::Config("loss_tol must be positive".into()));
        }
        if let Some(d) = self.clip_threshold {
            if !(d > 0.0) {
                return Err(LabError::Config("clip threshold must be positive".into()));
            }
        }
        if self.metric_period == 0 || self.loss_period == Some(0) {
            return Err(LabError::Config("periods must be positive".into()));
        }
        Ok(())
    }

    fn effective_loss_period(&self) -> u64 {
        self.loss_period.unwrap_or(match self.mode {
            Mode::Gd => 1,
            Mode::Sgd => self.metric_period,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    Diverged { iteration: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: u64,
    /// Full empirical risk at this iteration.
    pub loss: f64,
    /// Clipping fired at least once since the previous recorded point.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: OptConfig,
    pub status: RunStatus,
    pub converged: bool,
    pub iterations: u64,
    pub loss_curve: Vec<LossPoint>,
    pub snapshots: Vec<SharpnessReport>,
    pub clip_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_clip_iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_risk: Option<f64>,
    pub init_norms: BTreeMap<String, f64>,
    /// Absent when the run diverged to non-finite parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<ModelParams>,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&SharpnessReport> {
        if self.converged {
            self.snapshots.last()
        } else {
            None
        }
    }
}

/// Rescales `g` in place to norm `delta` if it is longer; returns whether
/// clipping fired. A zero gradient is left alone.
pub fn clip_gradient(g: &mut [f64], delta: f64) -> bool {
    let norm = norm2(g);
    if norm > delta && norm > 0.0 {
        let s = delta / norm;
        g.iter_mut().for_each(|v| *v *= s);
        true
    } else {
        false
    }
}

/// Non-mutating form of [`clip_gradient`].
pub fn clipped_gradient(g: &[f64], delta: f64) -> (Vec<f64>, bool) {
    let mut out = g.to_vec();
    let fired = clip_gradient(&mut out, delta);
    (out, fired)
}

/// `(1/2n) Σ (f(x_i) − y_i)²`
pub fn empirical_risk<M: Model + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in dataset.inputs.iter_rows().zip(&dataset.labels) {
        let e = model.forward(x)? - y;
        s += e * e;
    }
    Ok(s / (2.0 * dataset.len() as f64))
}

/// Monte-Carlo estimate of the population risk on a held-out set.
pub fn test_risk<M: Model + ?Sized>(model: &M, test_set: &Dataset) -> Result<f64> {
    empirical_risk(model, test_set)
}

/// `a_j ~ N(0, 1)`, `w_j ~ N(0, I_d/√d)` (per-coordinate variance `1/√d`).
pub fn init_relu(m: usize, d: usize, stream: &mut RngStream) -> Result<ReluNet> {
    let a = stream.gaussian(m)?;
    let std = (d as f64).powf(-0.25);
    let w: Vec<f64> = stream.gaussian(m * d)?.into_iter().map(|z| z * std).collect();
    ReluNet::new(a, Matrix::from_vec(m, d, w)?)
}

/// `a_j ~ N(0, var_a)`, `b_j ~ N(0, var_b)`, depth 2.
pub fn init_diag(d: usize, var_a: f64, var_b: f64, stream: &mut RngStream) -> Result<DiagNet> {
    if !(var_a >= 0.0 && var_b >= 0.0) {
        return Err(LabError::domain("initialization variances must be non-negative"));
    }
    let (sa, sb) = (var_a.sqrt(), var_b.sqrt());
    let a = stream.gaussian(d)?.into_iter().map(|z| z * sa).collect();
    let b = stream.gaussian(d)?.into_iter().map(|z| z * sb).collect();
    DiagNet::shallow(a, b)
}

fn is_diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

/// Trains from `init` until convergence, divergence or `max_iters`.
///
/// GD stops once `L̂(θ_t) ≤ loss_tol`. SGD stops once the mean per-sample
/// loss over the last `n` steps is below `loss_tol` and the full empirical
/// risk confirms it. The sampling sequence comes from `stream`.
pub fn train(
    init: &ModelParams,
    dataset: &Dataset,
    config: &OptConfig,
    test_set: Option<&Dataset>,
    stream: &mut RngStream,
) -> Result<RunRecord> {
    config.validate()?;
    if dataset.is_empty() || dataset.dim() != init.input_dim() {
        return Err(LabError::domain("dataset does not match the model"));
    }
    let n = dataset.len();
    let p = init.num_params();
    let eta = config.learning_rate;
    let loss_period = config.effective_loss_period();

    let mut params = init.clone();
    let mut grad = vec![0.0; p];
    let mut step = vec![0.0; p];
    let mut loss_curve = Vec::new();
    let mut snapshots: Vec<SharpnessReport> = Vec::new();
    let mut clip_count = 0u64;
    let mut last_clip = None;
    let mut clipped_since_record = false;

    // Trailing window of per-step sample losses for SGD.
    let mut window = vec![0.0; n];
    let mut window_sum = 0.0;
    let mut window_fill = 0usize;

    let mut status = RunStatus::MaxIters;
    let mut t = 0u64;
    while t < config.max_iters {
        let mut full_loss = None;

        if config.mode == Mode::Gd {
            step.fill(0.0);
            let mut sq = 0.0;
            for (x, y) in dataset.inputs.iter_rows().zip(&dataset.labels) {
                let e = params.forward_grad(x, &mut grad)? - y;
                sq += e * e;
                axpy(e, &grad, &mut step);
            }
            step.iter_mut().for_each(|v| *v /= n as f64);
            full_loss = Some(sq / (2.0 * n as f64));
        }

        if t % loss_period == 0 {
            let loss = match full_loss {
                Some(l) => l,
                None => empirical_risk(&params, dataset)?,
            };
            if loss.is_finite() {
                loss_curve.push(LossPoint {
                    iteration: t,
                    loss,
                    clipped: clipped_since_record,
                });
            }
            clipped_since_record = false;
        }
        if t % config.metric_period == 0 && t > 0 {
            if let Ok(r) = sharpness_report(&params, dataset, t, false) {
                snapshots.push(r);
            }
        }

        match config.mode {
            Mode::Gd => {
                let loss = full_loss.expect("computed above");
                if is_diverged(loss) {
                    status = RunStatus::Diverged { iteration: t };
                    break;
                }
                if loss <= config.loss_tol {
                    status = RunStatus::Converged;
                    break;
                }
            }
            Mode::Sgd => {
                let i = stream.index(n);
                let e = params.forward_grad(dataset.inputs.row(i), &mut grad)? - dataset.labels[i];
                let sample_loss = 0.5 * e * e;
                if is_diverged(sample_loss) {
                    status = RunStatus::Diverged { iteration: t };
                    break;
                }
                let slot = (t as usize) % n;
                window_sum += sample_loss - window[slot];
                window[slot] = sample_loss;
                window_fill = (window_fill + 1).min(n);
                if window_fill == n && slot == n - 1 {
                    // Resum once per window to shed accumulated rounding.
                    window_sum = window.iter().sum();
                }
                if window_fill == n && window_sum / n as f64 <= config.loss_tol {
                    let full = empirical_risk(&params, dataset)?;
                    if full <= config.loss_tol {
                        status = RunStatus::Converged;
                        break;
                    }
                }
                for (s, g) in step.iter_mut().zip(&grad) {
                    *s = e * g;
                }
            }
        }

        if let Some(delta) = config.clip_threshold {
            if clip_gradient(&mut step, delta) {
                clip_count += 1;
                last_clip = Some(t);
                clipped_since_record = true;
            }
        }
        params.add_scaled(-eta, &step);
        t += 1;
    }

    let final_loss = empirical_risk(&params, dataset)?;
    if is_diverged(final_loss) && !matches!(status, RunStatus::Diverged { .. }) {
        status = RunStatus::Diverged { iteration: t };
    }
    let converged = final_loss <= config.loss_tol;
    if converged {
        status = RunStatus::Converged;
    } else if status == RunStatus::Converged {
        status = RunStatus::MaxIters;
    }

    let finite = params.is_finite();
    if finite {
        if loss_curve.last().map_or(true, |l| l.iteration != t) && final_loss.is_finite() {
            loss_curve.push(LossPoint {
                iteration: t,
                loss: final_loss,
                clipped: clipped_since_record,
            });
        }
        if let Ok(r) = sharpness_report(&params, dataset, t, config.final_spectrum) {
            if snapshots.last().map_or(false, |s| s.iteration == t) {
                snapshots.pop();
            }
            snapshots.push(r);
        }
    }

    let test_risk = match (test_set, finite) {
        (Some(ts), true) => Some(test_risk(&params, ts)?).filter(|r| r.is_finite()),
        _ => None,
    };

    Ok(RunRecord {
        config: config.clone(),
        status,
        converged,
        iterations: t,
        loss_curve,
        snapshots,
        clip_count,
        last_clip_iteration: last_clip,
        final_loss: Some(final_loss).filter(|l| l.is_finite()),
        test_risk,
        init_norms: init.norms(),
        final_params: finite.then_some(params),
    })
}
