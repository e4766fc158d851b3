//! Shared helpers for the integration tests: tiny random instances and
//! brute-force references built from the explicit p×p Fisher matrix.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use stability_lab::data::{build_dataset, make_teacher_relu, sample_sphere_inputs, Dataset, InputDistribution};
use stability_lab::numerics::{Matrix, RngStream};
use stability_lab::{DiagNet, Model, ModelParams, ReluNet};

pub struct Instance {
    pub label: String,
    pub model: ModelParams,
    pub data: Dataset,
}

/// Random tiny ReLU instance with labels from an independent teacher.
pub fn relu_instance(seed: u64, m: usize, d: usize, n: usize) -> Instance {
    let mut s = RngStream::new(seed, 100);
    let a = s.gaussian(m).unwrap();
    let w = Matrix::from_vec(m, d, s.gaussian(m * d).unwrap()).unwrap();
    let teacher = make_teacher_relu(2, d, &mut RngStream::new(seed, 101)).unwrap();
    let x = sample_sphere_inputs(n, d, &mut RngStream::new(seed, 102)).unwrap();
    Instance {
        label: format!("relu seed={seed} m={m} d={d} n={n}"),
        model: ModelParams::Relu(ReluNet::new(a, w).unwrap()),
        data: build_dataset(x, &teacher, InputDistribution::Sphere, seed, 102).unwrap(),
    }
}

/// Random tiny diagonal-network instance of the given depth.
pub fn diag_instance(seed: u64, d: usize, n: usize, depth: u32) -> Instance {
    let mut s = RngStream::new(seed, 200);
    let scale = if depth > 2 { 0.8 } else { 1.0 };
    let a: Vec<f64> = s.gaussian(d).unwrap().into_iter().map(|v| v * scale).collect();
    let b: Vec<f64> = s.gaussian(d).unwrap().into_iter().map(|v| v * scale).collect();
    let x = Matrix::from_vec(n, d, s.gaussian(n * d).unwrap()).unwrap();
    let beta: Vec<f64> = s.gaussian(d).unwrap();
    let teacher = stability_lab::data::make_teacher_linear(beta).unwrap();
    Instance {
        label: format!("diag seed={seed} d={d} n={n} depth={depth}"),
        model: ModelParams::Diag(DiagNet::new(a, b, depth).unwrap()),
        data: build_dataset(x, &teacher, InputDistribution::Cube, seed, 200).unwrap(),
    }
}

/// At least 20 instances with p ≤ 64 and n ≤ 8 across both families.
pub fn tiny_instances() -> Vec<Instance> {
    let mut out = Vec::new();
    for seed in 0..12u64 {
        let m = 2 + (seed as usize % 4);
        let d = 2 + (seed as usize % 3);
        let n = 3 + (seed as usize % 6);
        out.push(relu_instance(seed, m, d, n));
    }
    for seed in 0..12u64 {
        let d = 3 + (seed as usize % 8);
        let n = 2 + (seed as usize % 7);
        let depth = if seed % 3 == 2 { 3 } else { 2 };
        out.push(diag_instance(seed, d, n, depth));
    }
    out
}

/// Per-example gradients as rows of an n×p matrix, and residuals.
pub fn jacobian(model: &ModelParams, data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = (data.len(), model.num_params());
    let mut phi = DMatrix::zeros(n, p);
    let mut e = DVector::zeros(n);
    let mut g = vec![0.0; p];
    for i in 0..n {
        let f = model.forward_grad(data.inputs.row(i), &mut g).unwrap();
        e[i] = f - data.labels[i];
        for j in 0..p {
            phi[(i, j)] = g[j];
        }
    }
    (phi, e)
}

/// Reference quantities computed from the explicit p×p Fisher matrix.
pub struct DenseReference {
    pub g: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub e: DVector<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub frobenius: f64,
    pub spectral: f64,
    pub risk: f64,
    pub tr_g_sigma: f64,
}

impl DenseReference {
    pub fn new(model: &ModelParams, data: &Dataset) -> Self {
        let (phi, e) = jacobian(model, data);
        let nf = data.len() as f64;
        let g = phi.transpose() * &phi / nf;
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(g.clone()).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        // Gradient-noise covariance Σ = (1/n)Σ e_i² g_i g_iᵀ − ∇L̂ ∇L̂ᵀ.
        let grad = phi.transpose() * &e / nf;
        let mut sigma = -(&grad * grad.transpose());
        for i in 0..data.len() {
            let gi = phi.row(i).transpose();
            sigma += &gi * gi.transpose() * (e[i] * e[i] / nf);
        }
        Self {
            trace: g.trace(),
            frobenius: g.norm(),
            spectral: eigenvalues[0].max(0.0),
            risk: e.norm_squared() / (2.0 * nf),
            tr_g_sigma: (&g * &sigma).trace(),
            eigenvalues,
            g,
            phi,
            e,
        }
    }

    pub fn alignment(&self) -> f64 {
        self.tr_g_sigma / (2.0 * self.risk) / (self.frobenius * self.frobenius)
    }

    /// `⟨uuᵀ, T_η uuᵀ⟩` with `u = Φᵀv`, directly in parameter space.
    pub fn rank_one_gap(&self, eta: f64, v: &[f64]) -> f64 {
        let n = v.len();
        let u = self.phi.transpose() * DVector::from_column_slice(v);
        let quad = (u.transpose() * &self.g * &u)[(0, 0)];
        let fourth: f64 = (0..n).map(|i| self.phi.row(i).dot(&u.transpose()).powi(4)).sum();
        2.0 * quad * u.norm_squared() - eta * fourth / n as f64
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// `E[δδᵀ]` evolved explicitly in parameter space:
/// `M ← M − η(GM + MG) + η² (1/n) Σ_i H_i M H_i`.
pub fn dense_second_moment_step(m: &DMatrix<f64>, reference: &DenseReference, eta: f64) -> DMatrix<f64> {
    let n = reference.phi.nrows();
    let g = &reference.g;
    let mut next = m - (g * m + m * g) * eta;
    for i in 0..n {
        let gi = reference.phi.row(i).transpose();
        let h = &gi * gi.transpose();
        next += &h * m * &h * (eta * eta / n as f64);
    }
    next
}

/// The same evolution written as a p²×p² linear map on `vec(M)`, applied
/// `steps` times.
pub fn vectorized_second_moment(m0: &DMatrix<f64>, reference: &DenseReference, eta: f64, steps: usize) -> Vec<DMatrix<f64>> {
    let p = m0.nrows();
    let n = reference.phi.nrows();
    let id = DMatrix::<f64>::identity(p, p);
    let g = &reference.g;
    // vec(AXB) = (Bᵀ ⊗ A) vec(X)
    let mut op = DMatrix::<f64>::identity(p * p, p * p) - (id.kronecker(g) + g.transpose().kronecker(&id)) * eta;
    for i in 0..n {
        let gi = reference.phi.row(i).transpose();
        let h = &gi * gi.transpose();
        op += h.transpose().kronecker(&h) * (eta * eta / n as f64);
    }
    let mut v = DVector::from_column_slice(m0.as_slice());
    let mut out = vec![m0.clone()];
    for _ in 0..steps {
        v = &op * v;
        out.push(DMatrix::from_column_slice(p, p, v.as_slice()));
    }
    out
}
