//! Sharpness of the empirical Fisher matrix `G = (1/n) Σ g_i g_iᵀ`.
//!
//! `G = ΦᵀΦ/n` and `K = ΦΦᵀ/n` (rows of `Φ` are per-example gradients) share
//! their nonzero spectrum, so trace, Frobenius norm and spectral norm of `G`
//! are read off the n×n Gram matrix `K`. The residual term of the Hessian,
//! `(1/n) Σ e_i ∇²f(x_i)`, is never formed: every report is a statement
//! about `G`, which equals the Hessian at a global minimum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::models::Model;
use crate::numerics::{dot, power_iteration_top, sym_eigenvalues, Matrix, SymMatrix};

/// Below this empirical risk the loss-scaled noise `S(θ)` is undefined.
pub const DEFAULT_RISK_FLOOR: f64 = 1e-12;

/// Relative floor under which small negative eigenvalues are rounding noise.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Up to this dimension the spectral norm comes from the full eigensolver.
const DENSE_SPECTRAL_MAX_DIM: usize = 64;

pub const CURVATURE_PROXY: &str = "empirical-fisher";

/// `K_ij = ⟨g_i, g_j⟩ / n` plus residuals `e_i = f(x_i) − y_i`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub k: SymMatrix,
    pub residuals: Vec<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    /// `(1/2n) Σ e_i²`
    pub fn empirical_risk(&self) -> f64 {
        dot(&self.residuals, &self.residuals) / (2.0 * self.n() as f64)
    }
}

pub fn residuals<M: Model + ?Sized>(model: &M, dataset: &Dataset) -> Result<Vec<f64>> {
    dataset
        .inputs
        .iter_rows()
        .zip(&dataset.labels)
        .map(|(x, y)| Ok(model.forward(x)? - y))
        .collect()
}

pub fn gram_matrix<M: Model + ?Sized>(model: &M, dataset: &Dataset) -> Result<GramMatrix> {
    if dataset.dim() != model.input_dim() {
        return Err(LabError::domain(format!(
            "dataset dimension {} does not match model input dimension {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(LabError::domain("empty dataset"));
    }
    let k = model.gradient_gram(&dataset.inputs)?.scaled(1.0 / n as f64);
    Ok(GramMatrix {
        k,
        residuals: residuals(model, dataset)?,
    })
}

/// The p×p Fisher matrix itself. Cheaper than the Gram route when `p < n`.
pub fn fisher_matrix_dense<M: Model + ?Sized>(model: &M, dataset: &Dataset) -> Result<SymMatrix> {
    let (n, p) = (dataset.len(), model.num_params());
    let mut grads = Matrix::zeros(n, p);
    for i in 0..n {
        model.forward_grad(dataset.inputs.row(i), grads.row_mut(i))?;
        if grads.row(i).iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFiniteGradient { index: i });
        }
    }
    let mut transposed = Matrix::zeros(p, n);
    for i in 0..n {
        for (j, g) in grads.row(i).iter().enumerate() {
            transposed.row_mut(j)[i] = *g;
        }
    }
    Ok(transposed.gram(1.0 / n as f64))
}

/// Whichever of `K` (n×n) and `G` (p×p) is smaller; both carry the same
/// trace, Frobenius norm and nonzero spectrum.
pub fn fisher_kernel<M: Model + ?Sized>(model: &M, dataset: &Dataset) -> Result<SymMatrix> {
    if model.num_params() < dataset.len() {
        fisher_matrix_dense(model, dataset)
    } else {
        Ok(gram_matrix(model, dataset)?.k)
    }
}

pub fn fisher_trace(gm: &GramMatrix) -> f64 {
    gm.k.trace()
}

pub fn fisher_frobenius(gm: &GramMatrix) -> f64 {
    gm.k.frobenius()
}

pub fn fisher_spectral(gm: &GramMatrix) -> Result<f64> {
    spectral_norm_psd(&gm.k)
}

pub fn fisher_eigenvalues(gm: &GramMatrix) -> Result<Vec<f64>> {
    Ok(clamp_floor(sym_eigenvalues(&gm.k)?))
}

/// Largest eigenvalue of a PSD matrix: exact eigensolver for small
/// dimensions, power iteration otherwise (falling back to the eigensolver if
/// it stalls).
pub fn spectral_norm_psd(m: &SymMatrix) -> Result<f64> {
    if m.dim() <= DENSE_SPECTRAL_MAX_DIM {
        return Ok(sym_eigenvalues(m)?.first().copied().unwrap_or(0.0).max(0.0));
    }
    match power_iteration_top(m, 1e-12, 20_000) {
        Ok(v) => Ok(v.max(0.0)),
        Err(LabError::Convergence { .. }) => {
            Ok(sym_eigenvalues(m)?.first().copied().unwrap_or(0.0).max(0.0))
        }
        Err(e) => Err(e),
    }
}

/// Eigenvalues in `[−EIGEN_FLOOR·λmax, 0)` become 0.
pub fn clamp_floor(mut values: Vec<f64>) -> Vec<f64> {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    for v in values.iter_mut() {
        if *v < 0.0 && *v >= -EIGEN_FLOOR * top {
            *v = 0.0;
        }
    }
    values
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProducts {
    /// `tr(G Σ)` for batch-size-1 SGD noise.
    pub tr_g_sigma: f64,
    pub risk: f64,
}

/// `tr(GΣ)` with `Σ = (1/n) Σ_i e_i² g_i g_iᵀ − ∇L̂ ∇L̂ᵀ`, the covariance of
/// `e_I g_I − ∇L̂` for `I` uniform on the samples.
///
/// In Gram coordinates `g_iᵀ G g_i = n Σ_j K_ij²` and `G^{1/2}∇L̂` has squared
/// norm `(1/n) ‖K e‖²`.
pub fn noise_covariance_products(gm: &GramMatrix) -> NoiseProducts {
    let n = gm.n();
    let nf = n as f64;
    let e = &gm.residuals;
    let mut first = 0.0;
    for i in 0..n {
        let row = gm.k.row(i);
        first += e[i] * e[i] * nf * dot(row, row);
    }
    first /= nf;
    let ke = gm.k.matvec(e);
    let second = dot(&ke, &ke) / nf;
    NoiseProducts {
        tr_g_sigma: first - second,
        risk: gm.empirical_risk(),
    }
}

/// `μ(θ) = tr(G S) / ‖G‖_F²` with `S = Σ / (2 L̂)`.
pub fn alignment_factor(gm: &GramMatrix, risk_floor: f64) -> Result<f64> {
    let noise = noise_covariance_products(gm);
    if noise.risk <= risk_floor {
        return Err(LabError::UndefinedAtMinimum {
            risk: noise.risk,
            floor: risk_floor,
        });
    }
    let frob_sq = gm.k.frobenius_sq();
    if frob_sq == 0.0 {
        return Err(LabError::UndefinedRatio("alignment factor with ‖G‖_F = 0"));
    }
    Ok(noise.tr_g_sigma / (2.0 * noise.risk) / frob_sq)
}

/// `⟨A, T_η A⟩` for `A = u uᵀ`, `u = Σ_i v_i g_i`:
/// `2 (uᵀGu) ‖u‖² − η (1/n) Σ_i (g_i·u)⁴`.
///
/// With `g_i·u = n (Kv)_i`, `‖u‖² = n vᵀKv` and `uᵀGu = n ‖Kv‖²` this is
/// `2n² ‖Kv‖² vᵀKv − η n³ Σ_i (Kv)_i⁴`. A negative value certifies that the
/// minimum is not linearly stable at step size `η`.
pub fn rank_one_stability_gap(gm: &GramMatrix, eta: f64, v: &[f64]) -> Result<f64> {
    if v.len() != gm.n() || v.iter().any(|x| !x.is_finite()) {
        return Err(LabError::domain("probe vector must be finite with one entry per sample"));
    }
    let nf = gm.n() as f64;
    let kv = gm.k.matvec(v);
    let quad = dot(v, &kv);
    let kv_sq = dot(&kv, &kv);
    let fourth: f64 = kv.iter().map(|x| x.powi(4)).sum();
    Ok(2.0 * nf * nf * kv_sq * quad - eta * nf * nf * nf * fourth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub iteration: u64,
    pub trace: f64,
    pub frobenius: f64,
    pub spectral: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    pub risk: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    pub norms: BTreeMap<String, f64>,
    pub curvature_proxy: String,
}

pub fn sharpness_report<M: Model + ?Sized>(
    model: &M,
    dataset: &Dataset,
    iteration: u64,
    with_spectrum: bool,
) -> Result<SharpnessReport> {
    let gm = gram_matrix(model, dataset)?;
    report_from_gram(&gm, model.norms(), iteration, with_spectrum)
}

pub fn report_from_gram(
    gm: &GramMatrix,
    norms: BTreeMap<String, f64>,
    iteration: u64,
    with_spectrum: bool,
) -> Result<SharpnessReport> {
    let (spectral, eigenvalues) = if with_spectrum {
        let eig = fisher_eigenvalues(gm)?;
        (eig.first().copied().unwrap_or(0.0).max(0.0), Some(eig))
    } else {
        (fisher_spectral(gm)?, None)
    };
    Ok(SharpnessReport {
        iteration,
        trace: fisher_trace(gm),
        frobenius: fisher_frobenius(gm),
        spectral,
        eigenvalues,
        risk: gm.empirical_risk(),
        alignment: alignment_factor(gm, DEFAULT_RISK_FLOOR).ok(),
        norms,
        curvature_proxy: CURVATURE_PROXY.into(),
    })
}
