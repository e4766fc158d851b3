//! Model families: two-layer ReLU networks `Σ_j a_j σ(w_j·x)` and diagonal
//! linear networks `⟨a^D ⊙ b^D, x⟩`.
//!
//! Flat parameter order is fixed: the `a` block first, then the rows of `W`
//! (ReLU) or the `b` block (diagonal). Every gradient, Gram matrix and
//! serialized parameter vector uses this order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, Matrix, SymMatrix};

pub trait Model {
    fn input_dim(&self) -> usize;

    fn num_params(&self) -> usize;

    fn forward(&self, x: &[f64]) -> Result<f64>;

    /// Writes `∇_θ f(x; θ)` into `grad` and returns `f(x; θ)`.
    fn forward_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn params_flat(&self) -> Vec<f64>;

    /// `θ += scale · direction` in flat order.
    fn add_scaled(&mut self, scale: f64, direction: &[f64]);

    /// Parameter norms reported next to the sharpness measures.
    fn norms(&self) -> BTreeMap<String, f64>;

    fn per_example_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.num_params()];
        self.forward_grad(x, &mut g)?;
        Ok(g)
    }

    /// Unscaled gradient inner products `⟨g_i, g_k⟩` over the rows of
    /// `inputs`. The default assembles every gradient; families override it
    /// with cheaper structured forms.
    fn gradient_gram(&self, inputs: &Matrix) -> Result<SymMatrix> {
        let n = inputs.rows();
        let mut grads = Matrix::zeros(n, self.num_params());
        for i in 0..n {
            self.forward_grad(inputs.row(i), grads.row_mut(i))?;
            if grads.row(i).iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFiniteGradient { index: i });
            }
        }
        Ok(grads.gram(1.0))
    }
}

#[inline]
fn relu(t: f64) -> f64 {
    t.max(0.0)
}

fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(LabError::domain(format!(
            "input has dimension {}, model expects {d}",
            x.len()
        )));
    }
    Ok(())
}

/// `f(x) = Σ_j a_j σ(w_j·x)` with `σ(t) = max(t, 0)` and `σ'(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    pub a: Vec<f64>,
    /// Inner weights, one row per neuron.
    pub w: Matrix,
}

impl ReluNet {
    pub fn new(a: Vec<f64>, w: Matrix) -> Result<Self> {
        if a.is_empty() || w.cols() == 0 {
            return Err(LabError::domain("ReLU net needs m >= 1 and d >= 1"));
        }
        if a.len() != w.rows() {
            return Err(LabError::domain(format!(
                "{} outer weights but {} inner weight rows",
                a.len(),
                w.rows()
            )));
        }
        if a.iter().chain(w.as_slice()).any(|v| !v.is_finite()) {
            return Err(LabError::domain("ReLU net parameters must be finite"));
        }
        Ok(Self { a, w })
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    /// `Σ_j |a_j| ‖w_j‖`
    pub fn path_norm(&self) -> f64 {
        self.a
            .iter()
            .zip(self.w.iter_rows())
            .map(|(a, w)| a.abs() * dot(w, w).sqrt())
            .sum()
    }

    /// `Σ_j (‖w_j‖² + q a_j²)`
    pub fn weighted_l2_norm(&self, q: f64) -> Result<f64> {
        if !(q > 0.0) {
            return Err(LabError::domain(format!("weight q must be positive, got {q}")));
        }
        Ok(self
            .a
            .iter()
            .zip(self.w.iter_rows())
            .map(|(a, w)| dot(w, w) + q * a * a)
            .sum())
    }
}

impl Model for ReluNet {
    fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn num_params(&self) -> usize {
        self.a.len() * (self.w.cols() + 1)
    }

    fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.input_dim())?;
        Ok(self
            .a
            .iter()
            .zip(self.w.iter_rows())
            .map(|(a, w)| a * relu(dot(w, x)))
            .sum())
    }

    fn forward_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_dim(x, self.input_dim())?;
        let m = self.width();
        let d = self.input_dim();
        let (ga, gw) = grad.split_at_mut(m);
        let mut out = 0.0;
        for (j, (a, w)) in self.a.iter().zip(self.w.iter_rows()).enumerate() {
            let z = dot(w, x);
            let row = &mut gw[j * d..(j + 1) * d];
            if z > 0.0 {
                out += a * z;
                ga[j] = z;
                for (r, xi) in row.iter_mut().zip(x) {
                    *r = a * xi;
                }
            } else {
                ga[j] = 0.0;
                row.fill(0.0);
            }
        }
        Ok(out)
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut v = self.a.clone();
        v.extend_from_slice(self.w.as_slice());
        v
    }

    fn add_scaled(&mut self, scale: f64, direction: &[f64]) {
        let m = self.width();
        crate::numerics::axpy(scale, &direction[..m], &mut self.a);
        crate::numerics::axpy(scale, &direction[m..], self.w.as_mut_slice());
    }

    fn norms(&self) -> BTreeMap<String, f64> {
        let d = self.input_dim() as f64;
        let mut out = BTreeMap::new();
        out.insert("path_norm".into(), self.path_norm());
        for (key, q) in [("l2q_1", 1.0), ("l2q_sqrt_d", d.sqrt()), ("l2q_d", d)] {
            out.insert(key.into(), self.weighted_l2_norm(q).expect("q > 0"));
        }
        out
    }

    /// `⟨g_i, g_k⟩ = Σ_j σ_ij σ_kj + (x_i·x_k) Σ_j a_j² 1[z_ij>0] 1[z_kj>0]`,
    /// which costs O(n²(m + d)) instead of O(n² m d).
    fn gradient_gram(&self, inputs: &Matrix) -> Result<SymMatrix> {
        let n = inputs.rows();
        let m = self.width();
        let mut act = Matrix::zeros(n, m);
        let mut gated = Matrix::zeros(n, m);
        for i in 0..n {
            let x = inputs.row(i);
            check_dim(x, self.input_dim())?;
            for (j, (a, w)) in self.a.iter().zip(self.w.iter_rows()).enumerate() {
                let z = dot(w, x);
                if z > 0.0 {
                    act.row_mut(i)[j] = z;
                    gated.row_mut(i)[j] = *a;
                }
            }
            if act.row(i).iter().chain(x).any(|v| !v.is_finite()) {
                return Err(LabError::NonFiniteGradient { index: i });
            }
        }
        Ok(SymMatrix::from_upper_fn(n, |i, k| {
            dot(act.row(i), act.row(k))
                + dot(inputs.row(i), inputs.row(k)) * dot(gated.row(i), gated.row(k))
        }))
    }
}

/// Diagonal linear network. Depth 2 is the shallow product
/// `f(x) = ⟨a ⊙ b, x⟩`; depth `D ≥ 3` is the deep variant
/// `f(x) = ⟨a^D ⊙ b^D, x⟩`. Powers use signed bases, so for even `D ≥ 4` the
/// effective coefficients are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagNet {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub depth: u32,
}

impl DiagNet {
    pub fn new(a: Vec<f64>, b: Vec<f64>, depth: u32) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(LabError::domain(format!(
                "a and b must be non-empty with equal length, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if depth < 2 {
            return Err(LabError::domain(format!("depth must be >= 2, got {depth}")));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(LabError::domain("diagonal net parameters must be finite"));
        }
        Ok(Self { a, b, depth })
    }

    /// Shallow (`D = 2`) network.
    pub fn shallow(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        Self::new(a, b, 2)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Power `k` applied to each factor: `β_j = a_j^k b_j^k`.
    fn exponent(&self) -> i32 {
        if self.depth == 2 {
            1
        } else {
            self.depth as i32
        }
    }

    /// `α = a⊙a + b⊙b`, defined for `D = 2`.
    pub fn alpha_vector(&self) -> Result<Vec<f64>> {
        if self.depth != 2 {
            return Err(LabError::UnsupportedDepth(self.depth));
        }
        Ok(self.a.iter().zip(&self.b).map(|(a, b)| a * a + b * b).collect())
    }

    /// `β`, the linear predictor the network represents.
    pub fn effective_coefficients(&self) -> Vec<f64> {
        let d = self.exponent();
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a.powi(d) * b.powi(d))
            .collect()
    }

    /// `r(θ) = ‖α‖₁ / (2‖β‖₁)`, at least 1 by AM-GM.
    pub fn balancedness(&self) -> Result<f64> {
        let alpha = self.alpha_vector()?;
        let beta_l1: f64 = self.effective_coefficients().iter().map(|b| b.abs()).sum();
        if beta_l1 == 0.0 {
            return Err(LabError::UndefinedRatio("balancedness with ‖β‖₁ = 0"));
        }
        Ok(alpha.iter().sum::<f64>() / (2.0 * beta_l1))
    }

    /// Alternative balancedness `0.5 ‖α‖₂ / ‖β‖₁`, reported alongside
    /// [`DiagNet::balancedness`].
    pub fn balancedness_l2(&self) -> Result<f64> {
        let alpha = self.alpha_vector()?;
        let beta_l1: f64 = self.effective_coefficients().iter().map(|b| b.abs()).sum();
        if beta_l1 == 0.0 {
            return Err(LabError::UndefinedRatio("balancedness with ‖β‖₁ = 0"));
        }
        Ok(0.5 * alpha.iter().map(|v| v * v).sum::<f64>().sqrt() / beta_l1)
    }

    /// Squared per-coordinate gradient weight `c_j` with
    /// `‖∇f(x)‖² = Σ_j c_j x_j²`.
    fn gradient_weights(&self) -> Vec<f64> {
        let d = self.exponent();
        let df = d as f64;
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| {
                let ga = df * a.powi(d - 1) * b.powi(d);
                let gb = df * a.powi(d) * b.powi(d - 1);
                ga * ga + gb * gb
            })
            .collect()
    }
}

impl Model for DiagNet {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn num_params(&self) -> usize {
        2 * self.a.len()
    }

    fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        if self.depth == 2 {
            return Ok(self
                .a
                .iter()
                .zip(&self.b)
                .zip(x)
                .map(|((a, b), x)| a * b * x)
                .sum());
        }
        Ok(dot(&self.effective_coefficients(), x))
    }

    fn forward_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        let dim = self.dim();
        let (ga, gb) = grad.split_at_mut(dim);
        let mut out = 0.0;
        if self.depth == 2 {
            for j in 0..dim {
                let (a, b, xj) = (self.a[j], self.b[j], x[j]);
                out += a * b * xj;
                ga[j] = b * xj;
                gb[j] = a * xj;
            }
        } else {
            let d = self.exponent();
            let df = d as f64;
            for j in 0..dim {
                let (a, b, xj) = (self.a[j], self.b[j], x[j]);
                let (ad1, bd1) = (a.powi(d - 1), b.powi(d - 1));
                out += ad1 * a * bd1 * b * xj;
                ga[j] = df * ad1 * bd1 * b * xj;
                gb[j] = df * ad1 * a * bd1 * xj;
            }
        }
        Ok(out)
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut v = self.a.clone();
        v.extend_from_slice(&self.b);
        v
    }

    fn add_scaled(&mut self, scale: f64, direction: &[f64]) {
        let d = self.dim();
        crate::numerics::axpy(scale, &direction[..d], &mut self.a);
        crate::numerics::axpy(scale, &direction[d..], &mut self.b);
    }

    fn norms(&self) -> BTreeMap<String, f64> {
        let beta = self.effective_coefficients();
        let mut out = BTreeMap::new();
        out.insert("beta_l1".into(), beta.iter().map(|b| b.abs()).sum());
        out.insert("beta_l2".into(), dot(&beta, &beta).sqrt());
        if self.depth == 2 {
            let alpha = self.alpha_vector().expect("depth 2");
            out.insert("alpha_l1".into(), alpha.iter().sum());
            out.insert("alpha_l2".into(), dot(&alpha, &alpha).sqrt());
            out.insert(
                "alpha_linf".into(),
                alpha.iter().copied().fold(0.0, f64::max),
            );
            if let Ok(r) = self.balancedness() {
                out.insert("balancedness".into(), r);
            }
            if let Ok(r) = self.balancedness_l2() {
                out.insert("balancedness_l2".into(), r);
            }
        } else {
            let p = 2.0 * (self.depth as f64 - 1.0) / self.depth as f64;
            out.insert("beta_lp_pow".into(), beta.iter().map(|b| b.abs().powf(p)).sum());
        }
        out
    }

    /// `⟨g_i, g_k⟩ = Σ_j c_j x_ij x_kj`.
    fn gradient_gram(&self, inputs: &Matrix) -> Result<SymMatrix> {
        let n = inputs.rows();
        let weights = self.gradient_weights();
        let mut weighted = Matrix::zeros(n, self.dim());
        for i in 0..n {
            let x = inputs.row(i);
            check_dim(x, self.dim())?;
            for (s, (x, c)) in weighted.row_mut(i).iter_mut().zip(x.iter().zip(&weights)) {
                *s = x * c;
            }
            if weighted.row(i).iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFiniteGradient { index: i });
            }
        }
        Ok(SymMatrix::from_upper_fn(n, |i, k| {
            dot(weighted.row(i), inputs.row(k))
        }))
    }
}

/// Either model family, with a fixed serialized form: a family tag, a shape
/// header and the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRecord", try_from = "ParamsRecord")]
pub enum ModelParams {
    Relu(ReluNet),
    Diag(DiagNet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsRecord {
    family: String,
    /// `[m, d]` for ReLU nets, `[d]` for diagonal nets.
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<u32>,
    values: Vec<f64>,
}

impl From<ModelParams> for ParamsRecord {
    fn from(p: ModelParams) -> Self {
        match &p {
            ModelParams::Relu(r) => ParamsRecord {
                family: "relu".into(),
                shape: vec![r.width(), r.input_dim()],
                depth: None,
                values: p.params_flat(),
            },
            ModelParams::Diag(dn) => ParamsRecord {
                family: "diag".into(),
                shape: vec![dn.dim()],
                depth: Some(dn.depth),
                values: p.params_flat(),
            },
        }
    }
}

impl TryFrom<ParamsRecord> for ModelParams {
    type Error = LabError;

    fn try_from(r: ParamsRecord) -> Result<Self> {
        match (r.family.as_str(), r.shape.as_slice()) {
            ("relu", &[m, d]) => {
                if r.values.len() != m * (d + 1) {
                    return Err(LabError::domain("relu parameter count does not match shape"));
                }
                let (a, w) = r.values.split_at(m);
                Ok(ModelParams::Relu(ReluNet::new(
                    a.to_vec(),
                    Matrix::from_vec(m, d, w.to_vec())?,
                )?))
            }
            ("diag", &[d]) => {
                if r.values.len() != 2 * d {
                    return Err(LabError::domain("diag parameter count does not match shape"));
                }
                let (a, b) = r.values.split_at(d);
                Ok(ModelParams::Diag(DiagNet::new(
                    a.to_vec(),
                    b.to_vec(),
                    r.depth.unwrap_or(2),
                )?))
            }
            (family, shape) => Err(LabError::domain(format!(
                "unknown parameter record {family} with shape {shape:?}"
            ))),
        }
    }
}

macro_rules! delegate {
    ($self:ident, $inner:ident => $body:expr) => {
        match $self {
            ModelParams::Relu($inner) => $body,
            ModelParams::Diag($inner) => $body,
        }
    };
}

impl Model for ModelParams {
    fn input_dim(&self) -> usize {
        delegate!(self, m => m.input_dim())
    }
    fn num_params(&self) -> usize {
        delegate!(self, m => m.num_params())
    }
    fn forward(&self, x: &[f64]) -> Result<f64> {
        delegate!(self, m => m.forward(x))
    }
    fn forward_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        delegate!(self, m => m.forward_grad(x, grad))
    }
    fn params_flat(&self) -> Vec<f64> {
        delegate!(self, m => m.params_flat())
    }
    fn add_scaled(&mut self, scale: f64, direction: &[f64]) {
        delegate!(self, m => m.add_scaled(scale, direction))
    }
    fn norms(&self) -> BTreeMap<String, f64> {
        delegate!(self, m => m.norms())
    }
    fn gradient_gram(&self, inputs: &Matrix) -> Result<SymMatrix> {
        delegate!(self, m => m.gradient_gram(inputs))
    }
}

impl ModelParams {
    pub fn is_finite(&self) -> bool {
        self.params_flat().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn relu_net(a: Vec<f64>, rows: &[Vec<f64>]) -> ReluNet {
        ReluNet::new(a, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn relu_forward_active_and_dead() {
        let net = relu_net(vec![1.0], &[vec![1.0, 0.0]]);
        assert_eq!(net.forward(&[2.0, -3.0]).unwrap(), 2.0);
        assert_eq!(net.forward(&[-2.0, 5.0]).unwrap(), 0.0);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn relu_gradient_by_hand() {
        let net = relu_net(vec![2.0], &[vec![1.0, 0.0]]);
        let g = net.per_example_gradient(&[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let net = relu_net(vec![3.0], &[vec![1.0, -1.0]]);
        let g = net.per_example_gradient(&[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn diag_forward_and_gradient() {
        let net = DiagNet::shallow(vec![1.0, 2.0], vec![3.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), 3.0);
        let net = DiagNet::shallow(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let g = net.per_example_gradient(&[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn path_and_weighted_norms() {
        let net = relu_net(vec![2.0, -1.0], &[vec![3.0, 4.0], vec![0.0, 1.0]]);
        assert_eq!(net.path_norm(), 11.0);
        let zero = relu_net(vec![0.0, 0.0], &[vec![3.0, 4.0], vec![0.0, 1.0]]);
        assert_eq!(zero.path_norm(), 0.0);

        let net = relu_net(vec![1.0], &[vec![1.0, 0.0]]);
        assert_eq!(net.weighted_l2_norm(4.0).unwrap(), 5.0);
        assert!(5.0 >= 2.0 * 2.0 * net.path_norm());
        let eq = relu_net(vec![1.0], &[vec![2.0, 0.0]]);
        assert_eq!(eq.weighted_l2_norm(4.0).unwrap(), 8.0);
        assert_eq!(2.0 * 4f64.sqrt() * eq.path_norm(), 8.0);
        assert!(net.weighted_l2_norm(0.0).is_err());
        assert!(net.weighted_l2_norm(-1.0).is_err());
    }

    #[test]
    fn alpha_beta_and_balancedness() {
        let net = DiagNet::shallow(vec![1.0, 2.0], vec![2.0, 1.0]).unwrap();
        assert_eq!(net.alpha_vector().unwrap(), vec![5.0, 5.0]);
        assert_eq!(net.effective_coefficients(), vec![2.0, 2.0]);

        let deep = DiagNet::new(vec![1.0; 3], vec![1.0; 3], 3).unwrap();
        assert_eq!(deep.effective_coefficients(), vec![1.0; 3]);
        assert!(matches!(deep.alpha_vector(), Err(LabError::UnsupportedDepth(3))));

        let bal = DiagNet::shallow(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(bal.balancedness().unwrap(), 1.0);
        let unbal = DiagNet::shallow(vec![2.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]).unwrap();
        assert_eq!(unbal.balancedness().unwrap(), 2.125);
        let dead = DiagNet::shallow(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(dead.balancedness(), Err(LabError::UndefinedRatio(_))));
    }

    #[test]
    fn structured_gram_matches_generic() {
        let mut s = RngStream::new(5, 0);
        let (n, d, m) = (7, 4, 5);
        let inputs = Matrix::from_vec(n, d, s.gaussian(n * d).unwrap()).unwrap();
        let relu = ReluNet::new(
            s.gaussian(m).unwrap(),
            Matrix::from_vec(m, d, s.gaussian(m * d).unwrap()).unwrap(),
        )
        .unwrap();
        let diag = DiagNet::new(s.gaussian(d).unwrap(), s.gaussian(d).unwrap(), 3).unwrap();
        for model in [ModelParams::Relu(relu), ModelParams::Diag(diag)] {
            let fast = model.gradient_gram(&inputs).unwrap();
            let mut grads = Matrix::zeros(n, model.num_params());
            for i in 0..n {
                model.forward_grad(inputs.row(i), grads.row_mut(i)).unwrap();
            }
            let slow = grads.gram(1.0);
            for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn serialization_round_trip() {
        let net = ModelParams::Relu(relu_net(vec![0.1, -2.5], &[vec![1.0 / 3.0, 4.0], vec![0.0, 1e-300]]));
        let json = serde_json::to_string(&net).unwrap();
        assert!(json.contains("\"shape\":[2,2]"));
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);

        let diag = ModelParams::Diag(DiagNet::new(vec![1.5, -2.0], vec![0.25, 3.0], 4).unwrap());
        let back: ModelParams = serde_json::from_str(&serde_json::to_string(&diag).unwrap()).unwrap();
        assert_eq!(back, diag);

        let bad = r#"{"family":"relu","shape":[2,2],"values":[1.0]}"#;
        assert!(serde_json::from_str::<ModelParams>(bad).is_err());
    }
}
