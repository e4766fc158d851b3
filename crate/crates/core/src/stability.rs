//! Stability predicates at a minimum, the exact second-moment recursion of
//! linearized SGD in Gram coordinates, and Monte-Carlo simulation of the
//! linearized dynamics.
//!
//! Every predicate here is a necessary condition. A failed check rules out
//! linear stability. A passed check, or a "stable" simulation verdict, only
//! means that no instability was detected.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::fisher::{
    alignment_factor, gram_matrix, rank_one_stability_gap, report_from_gram, GramMatrix,
    SharpnessReport, DEFAULT_RISK_FLOOR,
};
use crate::models::Model;
use crate::numerics::{axpy, dot, sym_eigen, Matrix, RngStream, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub passed: bool,
    pub margin: f64,
}

impl Check {
    fn at_most(value: f64, bound: f64) -> Self {
        Check {
            passed: value <= bound,
            margin: bound - value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub passed: bool,
    pub margin: f64,
    pub mu0: f64,
}

/// `tr(G) ≤ 2/η`, necessary for linear stability under SGD.
pub fn check_linear_stability_trace(report: &SharpnessReport, eta: f64) -> Check {
    Check::at_most(report.trace, 2.0 / eta)
}

/// `‖G‖₂ ≤ 2/η`, necessary for linear stability under GD. The boundary
/// counts as stable.
pub fn check_gd_stability(report: &SharpnessReport, eta: f64) -> Check {
    Check::at_most(report.spectral, 2.0 / eta)
}

/// `‖G‖_F ≤ √(1/μ₀)/η`; above it the expected loss grows geometrically.
pub fn check_loss_stability(report: &SharpnessReport, eta: f64, mu0: f64) -> Result<LossCheck> {
    if !(mu0 > 0.0) {
        return Err(LabError::domain(format!("μ₀ must be positive, got {mu0}")));
    }
    let c = Check::at_most(report.frobenius, (1.0 / mu0).sqrt() / eta);
    Ok(LossCheck {
        passed: c.passed,
        margin: c.margin,
        mu0,
    })
}

/// `(Σ λ_j w_j)² / Σ λ_j w_j²`, the diagonal-weight form of the PSD
/// condition on `T_η`. Its maximum over `w` is `Σ λ_j`, reached at uniform
/// weights.
pub fn diagonal_weight_ratio(eigenvalues: &[f64], weights: &[f64]) -> f64 {
    let num = dot(eigenvalues, weights);
    let den: f64 = eigenvalues
        .iter()
        .zip(weights)
        .map(|(l, w)| l * w * w)
        .sum();
    num * num / den
}

/// `E[δ_t δ_tᵀ]` of linearized SGD, split into a part on the gradient span,
/// `Q = Σ_ab C_ab g_a g_bᵀ`, and a span-orthogonal part that the dynamics
/// leave untouched. Cross terms between the two are assumed to be zero,
/// which holds for isotropic initial deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentState {
    pub c: SymMatrix,
    /// Frobenius norm of the span-orthogonal block.
    pub orth_mass: f64,
    /// Trace of the span-orthogonal block.
    pub orth_trace: f64,
}

impl SecondMomentState {
    /// State for `δ₀ ~ N(0, variance·I_p)`: the span part is `variance·P`
    /// with `P = Φᵀ (nK)⁺ Φ`, the rest has rank `p − rank(K)`.
    pub fn isotropic(gm: &GramMatrix, variance: f64, num_params: usize) -> Result<Self> {
        let n = gm.n();
        let eig = sym_eigen(&gm.k, true)?;
        let vectors = eig.vectors.expect("requested eigenvectors");
        let top = eig.values.first().copied().unwrap_or(0.0);
        let cutoff = 1e-10 * top.max(0.0);
        let mut c = vec![0.0; n * n];
        let mut rank = 0usize;
        for (r, &lambda) in eig.values.iter().enumerate() {
            if lambda <= cutoff || lambda <= 0.0 {
                continue;
            }
            rank += 1;
            let u = vectors.row(r);
            let s = variance / (n as f64 * lambda);
            for i in 0..n {
                axpy(s * u[i], u, &mut c[i * n..(i + 1) * n]);
            }
        }
        if rank > num_params {
            return Err(LabError::domain("Gram rank exceeds parameter count"));
        }
        let orth_dim = (num_params - rank) as f64;
        Ok(Self {
            c: SymMatrix::from_full(n, c)?,
            orth_mass: variance * orth_dim.sqrt(),
            orth_trace: variance * orth_dim,
        })
    }

    /// `‖Q‖_F = √(n² tr(CKCK) + orth_mass²)`.
    pub fn frobenius(&self, gm: &GramMatrix) -> f64 {
        let n = gm.n();
        let ck = self.c.matmul(&gm.k);
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr += ck[i * n + j] * ck[j * n + i];
            }
        }
        let nf = n as f64;
        (nf * nf * tr + self.orth_mass * self.orth_mass).max(0.0).sqrt()
    }

    /// `tr(Q) = E‖δ‖² = n tr(CK) + orth_trace`.
    pub fn trace(&self, gm: &GramMatrix) -> f64 {
        gm.n() as f64 * self.c.trace_product(&gm.k) + self.orth_trace
    }
}

/// One step of `Q ← Q − η(QG + GQ) + η² E[H_i Q H_i]` with `H_i = g_i g_iᵀ`.
///
/// On coefficients: `GQ ↦ KC`, and `H_i Q H_i = n² (KCK)_ii g_i g_iᵀ`, so
/// `C' = C − η(CK + KC) + η² n diag((KCK)_ii)`.
pub fn second_moment_step(state: &SecondMomentState, gm: &GramMatrix, eta: f64) -> SecondMomentState {
    let n = gm.n();
    let nf = n as f64;
    let ck = state.c.matmul(&gm.k);
    let mut next = state.c.as_slice().to_vec();
    for i in 0..n {
        for j in 0..n {
            // (KC)_ij = (CK)_ji
            next[i * n + j] -= eta * (ck[i * n + j] + ck[j * n + i]);
        }
        let kck_ii: f64 = (0..n).map(|j| gm.k.get(i, j) * ck[j * n + i]).sum();
        next[i * n + i] += eta * eta * nf * kck_ii;
    }
    SecondMomentState {
        c: SymMatrix::from_full(n, next).expect("square by construction"),
        orth_mass: state.orth_mass,
        orth_trace: state.orth_trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationVerdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub eta: f64,
    pub steps: usize,
    pub trajectories: usize,
    /// `E‖δ₀‖` relative to `‖θ*‖` (absolute if `‖θ*‖ = 0`).
    pub init_scale: f64,
    pub checkpoints: usize,
}

impl SimulationConfig {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            steps: 2000,
            trajectories: 64,
            init_scale: 1e-3,
            checkpoints: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCheckpoint {
    pub step: usize,
    /// Sample mean of `‖δ_t‖²`.
    pub mean_sq_norm: f64,
    /// Standard error of that mean.
    pub sq_norm_stderr: f64,
    /// `‖(1/M) Σ δ δᵀ‖_F`
    pub second_moment_frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub checkpoints: Vec<SimulationCheckpoint>,
    /// Terminal over initial second-moment Frobenius norm.
    pub growth_ratio: f64,
    pub verdict: SimulationVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow_step: Option<usize>,
}

pub const STABLE_RATIO: f64 = 1.0;
pub const UNSTABLE_RATIO: f64 = 10.0;
const SIM_STREAM_BASE: u64 = 1 << 32;
const OVERFLOW_SQ_NORM: f64 = 1e300;

pub fn verdict_from_ratio(ratio: f64) -> SimulationVerdict {
    if !ratio.is_finite() || ratio >= UNSTABLE_RATIO {
        SimulationVerdict::Unstable
    } else if ratio <= STABLE_RATIO {
        SimulationVerdict::Stable
    } else {
        SimulationVerdict::Inconclusive
    }
}

/// Runs `δ_{t+1} = δ_t − η g_i g_iᵀ δ_t` with `i` uniform, for `M`
/// independent trajectories. Trajectory `j` draws from stream
/// `(seed, 2³² + j)`.
pub fn simulate_linearized_sgd<M: Model + ?Sized>(
    model: &M,
    dataset: &Dataset,
    config: &SimulationConfig,
    seed: u64,
) -> Result<SimulationResult> {
    if config.trajectories == 0 || config.checkpoints == 0 {
        return Err(LabError::domain("need at least one trajectory and one checkpoint"));
    }
    let (n, p) = (dataset.len(), model.num_params());
    let mut grads = Matrix::zeros(n, p);
    for i in 0..n {
        model.forward_grad(dataset.inputs.row(i), grads.row_mut(i))?;
    }
    let theta_norm = dot(&model.params_flat(), &model.params_flat()).sqrt();
    let scale = if theta_norm > 0.0 { theta_norm } else { 1.0 };
    let std = config.init_scale * scale / (p as f64).sqrt();

    let check_steps: Vec<usize> = (0..=config.checkpoints)
        .map(|c| c * config.steps / config.checkpoints)
        .collect();

    let mut snapshots: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(config.trajectories); check_steps.len()];
    let mut overflow_step: Option<usize> = None;

    for j in 0..config.trajectories {
        let mut rng = RngStream::new(seed, SIM_STREAM_BASE + j as u64);
        let mut delta: Vec<f64> = rng.gaussian(p)?.into_iter().map(|z| z * std).collect();
        let mut next_check = 0;
        let mut overflowed = false;
        for t in 0..=config.steps {
            if next_check < check_steps.len() && check_steps[next_check] == t {
                snapshots[next_check].push(delta.clone());
                next_check += 1;
            }
            if t == config.steps || overflowed {
                continue;
            }
            let g = grads.row(rng.index(n));
            let proj = dot(g, &delta);
            axpy(-config.eta * proj, g, &mut delta);
            let sq = dot(&delta, &delta);
            if !sq.is_finite() || sq > OVERFLOW_SQ_NORM {
                overflowed = true;
                overflow_step = Some(overflow_step.map_or(t + 1, |s| s.min(t + 1)));
                // Remaining checkpoints record the overflowed state.
                delta.iter_mut().for_each(|v| *v = f64::INFINITY);
            }
        }
        if overflowed {
            while next_check < check_steps.len() {
                snapshots[next_check].push(delta.clone());
                next_check += 1;
            }
        }
    }

    let checkpoints: Vec<SimulationCheckpoint> = check_steps
        .iter()
        .zip(&snapshots)
        .map(|(&step, deltas)| checkpoint_stats(step, deltas))
        .collect();
    let first = checkpoints.first().map_or(0.0, |c| c.second_moment_frobenius);
    let last = checkpoints.last().map_or(0.0, |c| c.second_moment_frobenius);
    let growth_ratio = if overflow_step.is_some() {
        f64::INFINITY
    } else if first > 0.0 {
        last / first
    } else {
        1.0
    };
    let verdict = if overflow_step.is_some() {
        SimulationVerdict::Unstable
    } else {
        verdict_from_ratio(growth_ratio)
    };
    Ok(SimulationResult {
        checkpoints,
        growth_ratio,
        verdict,
        overflow_step,
    })
}

fn checkpoint_stats(step: usize, deltas: &[Vec<f64>]) -> SimulationCheckpoint {
    let m = deltas.len();
    let mf = m as f64;
    let sq: Vec<f64> = deltas.iter().map(|d| dot(d, d)).collect();
    let mean = sq.iter().sum::<f64>() / mf;
    let var = if m > 1 {
        sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (mf - 1.0)
    } else {
        0.0
    };
    let p = deltas.first().map_or(0, Vec::len);
    // ‖(1/M) Σ δδᵀ‖_F² either through the p×p matrix or the M×M overlaps.
    let frob_sq = if p * p <= m * m {
        let mut acc = vec![0.0; p * p];
        for d in deltas {
            for a in 0..p {
                axpy(d[a], d, &mut acc[a * p..(a + 1) * p]);
            }
        }
        acc.iter().map(|v| v * v).sum::<f64>() / (mf * mf)
    } else {
        let mut s = 0.0;
        for a in 0..m {
            s += sq[a] * sq[a];
            for b in (a + 1)..m {
                let o = dot(&deltas[a], &deltas[b]);
                s += 2.0 * o * o;
            }
        }
        s / (mf * mf)
    };
    SimulationCheckpoint {
        step,
        mean_sq_norm: mean,
        sq_norm_stderr: (var / mf).sqrt(),
        second_moment_frobenius: frob_sq.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub loss_tol: f64,
    /// Classify even when the loss is above `loss_tol`.
    pub force: bool,
    /// `μ₀` for the loss check; measured `μ(θ)` when absent.
    pub mu0: Option<f64>,
    pub n_probes: usize,
    pub probe_seed: u64,
    pub simulation: Option<SimulationConfig>,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            loss_tol: 1e-8,
            force: false,
            mu0: None,
            n_probes: 200,
            probe_seed: 0,
            simulation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOneCertificates {
    pub negative: usize,
    pub trials: usize,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub eta: f64,
    pub risk: f64,
    /// The point was classified above `loss_tol`; the checks concern minima.
    pub high_loss_warning: bool,
    pub trace_check: Check,
    pub spectral_check: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_check: Option<LossCheck>,
    pub rank_one: RankOneCertificates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationResult>,
}

pub fn classify_minimum<M: Model + ?Sized>(
    model: &M,
    dataset: &Dataset,
    eta: f64,
    options: &ClassifyOptions,
) -> Result<StabilityVerdict> {
    if !(eta > 0.0) {
        return Err(LabError::domain(format!("learning rate must be positive, got {eta}")));
    }
    let gm = gram_matrix(model, dataset)?;
    let risk = gm.empirical_risk();
    let high_loss = risk > options.loss_tol;
    if high_loss && !options.force {
        return Err(LabError::domain(format!(
            "risk {risk:e} exceeds loss_tol {:e}; pass force to classify anyway",
            options.loss_tol
        )));
    }
    let report = report_from_gram(&gm, model.norms(), 0, false)?;
    let simulation = match &options.simulation {
        Some(sim) => {
            let sim = SimulationConfig { eta, ..*sim };
            Some(simulate_linearized_sgd(model, dataset, &sim, options.probe_seed)?)
        }
        None => None,
    };
    let verdict = StabilityVerdict {
        eta,
        risk,
        high_loss_warning: high_loss,
        trace_check: check_linear_stability_trace(&report, eta),
        spectral_check: check_gd_stability(&report, eta),
        loss_check: loss_check(&gm, &report, eta, options.mu0)?,
        rank_one: rank_one_search(&gm, eta, options.n_probes, options.probe_seed)?,
        simulation,
    };
    Ok(verdict)
}

fn loss_check(
    gm: &GramMatrix,
    report: &SharpnessReport,
    eta: f64,
    mu0: Option<f64>,
) -> Result<Option<LossCheck>> {
    let mu0 = match mu0 {
        Some(m) => Some(m),
        None => alignment_factor(gm, DEFAULT_RISK_FLOOR).ok().filter(|m| *m > 0.0),
    };
    mu0.map(|m| check_loss_stability(report, eta, m)).transpose()
}

fn rank_one_search(gm: &GramMatrix, eta: f64, probes: usize, seed: u64) -> Result<RankOneCertificates> {
    let mut rng = RngStream::new(seed, 0);
    let mut negative = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..probes {
        let v = rng.gaussian(gm.n())?;
        let gap = rank_one_stability_gap(gm, eta, &v)?;
        if gap < 0.0 {
            negative += 1;
        }
        min_gap = min_gap.min(gap);
    }
    Ok(RankOneCertificates {
        negative,
        trials: probes,
        min_gap: if probes == 0 { 0.0 } else { min_gap },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(trace: f64, frobenius: f64, spectral: f64) -> SharpnessReport {
        SharpnessReport {
            iteration: 0,
            trace,
            frobenius,
            spectral,
            eigenvalues: None,
            risk: 0.0,
            alignment: None,
            norms: BTreeMap::new(),
            curvature_proxy: "empirical-fisher".into(),
        }
    }

    #[test]
    fn trace_check_margins() {
        let c = check_linear_stability_trace(&report(1.9, 0.0, 0.0), 1.0);
        assert!(c.passed);
        assert!((c.margin - 0.1).abs() < 1e-12);
        let c = check_linear_stability_trace(&report(2.1, 0.0, 0.0), 1.0);
        assert!(!c.passed);
        assert!((c.margin + 0.1).abs() < 1e-12);
    }

    #[test]
    fn gd_check_boundary_inclusive() {
        let eta = 0.25;
        assert!(check_gd_stability(&report(0.0, 0.0, 2.0 / eta), eta).passed);
        let c = check_gd_stability(&report(0.0, 0.0, 0.0), eta);
        assert!(c.passed);
        assert_eq!(c.margin, 8.0);
    }

    #[test]
    fn loss_check_scaling() {
        let c = check_loss_stability(&report(0.0, 0.5, 0.0), 1.0, 1.0).unwrap();
        assert!(c.passed);
        let r = report(0.0, 0.0, 0.0);
        let one = check_loss_stability(&r, 1.0, 1.0).unwrap().margin;
        let four = check_loss_stability(&r, 1.0, 4.0).unwrap().margin;
        assert_eq!(four, one / 2.0);
        assert!(check_loss_stability(&r, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let gm = GramMatrix {
            k: SymMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(),
            residuals: vec![0.0, 0.0],
        };
        let s = SecondMomentState {
            c: SymMatrix::zeros(2),
            orth_mass: 0.0,
            orth_trace: 0.0,
        };
        assert_eq!(second_moment_step(&s, &gm, 0.3), s);
    }

    #[test]
    fn scalar_recursion() {
        // n = 1, K = [k]: c' = c (1 − 2ηk + η² k²).
        let k = 1.7;
        let gm = GramMatrix {
            k: SymMatrix::from_diag(&[k]),
            residuals: vec![0.0],
        };
        for eta in [0.1, 1.0, 2.0 / k, 1.5] {
            let s = SecondMomentState {
                c: SymMatrix::from_diag(&[0.8]),
                orth_mass: 0.0,
                orth_trace: 0.0,
            };
            let next = second_moment_step(&s, &gm, eta);
            let expect = 0.8 * (1.0 - 2.0 * eta * k + eta * eta * k * k);
            assert!((next.c.get(0, 0) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_weight_ratio_at_uniform_is_trace() {
        let lambda = [3.0, 1.0, 0.5];
        assert!((diagonal_weight_ratio(&lambda, &[1.0; 3]) - 4.5).abs() < 1e-14);
        assert!(diagonal_weight_ratio(&lambda, &[1.0, 0.0, 0.0]) <= 4.5);
    }

    #[test]
    fn verdict_thresholds() {
        assert_eq!(verdict_from_ratio(0.5), SimulationVerdict::Stable);
        assert_eq!(verdict_from_ratio(1.0), SimulationVerdict::Stable);
        assert_eq!(verdict_from_ratio(3.0), SimulationVerdict::Inconclusive);
        assert_eq!(verdict_from_ratio(10.0), SimulationVerdict::Unstable);
        assert_eq!(verdict_from_ratio(f64::INFINITY), SimulationVerdict::Unstable);
    }
}
