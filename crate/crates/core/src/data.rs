//! Synthetic inputs and noiseless teacher labels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, Matrix, RngStream};

/// Test-set size for Monte-Carlo estimates of the population risk.
pub const DEFAULT_N_TEST: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputDistribution {
    /// Uniform on the sphere of radius `√d`.
    Sphere,
    /// Coordinates iid uniform on `[-1, 1]`.
    Cube,
}

impl InputDistribution {
    pub fn sample(self, n: usize, d: usize, stream: &mut RngStream) -> Result<Matrix> {
        match self {
            InputDistribution::Sphere => sample_sphere_inputs(n, d, stream),
            InputDistribution::Cube => sample_cube_inputs(n, d, stream),
        }
    }
}

pub fn sample_sphere_inputs(n: usize, d: usize, stream: &mut RngStream) -> Result<Matrix> {
    check_sizes(n, d)?;
    let radius = (d as f64).sqrt();
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let v = stream.unit_sphere(d)?;
        for (dst, src) in x.row_mut(i).iter_mut().zip(v) {
            *dst = src * radius;
        }
    }
    Ok(x)
}

pub fn sample_cube_inputs(n: usize, d: usize, stream: &mut RngStream) -> Result<Matrix> {
    check_sizes(n, d)?;
    Matrix::from_vec(n, d, stream.uniform(n * d, -1.0, 1.0)?)
}

fn check_sizes(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(LabError::domain(format!("need n, d >= 1, got n={n}, d={d}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Teacher {
    /// `f*(x) = Σ_i σ(v_i·x)` with unit directions `v_i` as rows.
    ReluSum { directions: Matrix },
    /// `f*(x) = β*·x`
    Linear { beta: Vec<f64> },
}

pub fn make_teacher_relu(k: usize, d: usize, stream: &mut RngStream) -> Result<Teacher> {
    if k == 0 {
        return Err(LabError::domain("teacher needs k >= 1 directions"));
    }
    let mut directions = Matrix::zeros(k, d);
    for i in 0..k {
        directions.row_mut(i).copy_from_slice(&stream.unit_sphere(d)?);
    }
    Ok(Teacher::ReluSum { directions })
}

pub fn make_teacher_linear(beta_star: Vec<f64>) -> Result<Teacher> {
    if beta_star.is_empty() || beta_star.iter().any(|b| !b.is_finite()) {
        return Err(LabError::domain("β* must be non-empty and finite"));
    }
    Ok(Teacher::Linear { beta: beta_star })
}

/// `β* = (1, …, 1, 0, …, 0)` with `support` leading ones.
pub fn sparse_ones(d: usize, support: usize) -> Vec<f64> {
    (0..d).map(|j| if j < support { 1.0 } else { 0.0 }).collect()
}

impl Teacher {
    pub fn input_dim(&self) -> usize {
        match self {
            Teacher::ReluSum { directions } => directions.cols(),
            Teacher::Linear { beta } => beta.len(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(LabError::domain(format!(
                "teacher expects dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(match self {
            Teacher::ReluSum { directions } => {
                directions.iter_rows().map(|v| dot(v, x).max(0.0)).sum()
            }
            Teacher::Linear { beta } => dot(beta, x),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Teacher::ReluSum { directions } => {
                format!("relu-sum(k={}, d={})", directions.rows(), directions.cols())
            }
            Teacher::Linear { beta } => {
                let l1: f64 = beta.iter().map(|b| b.abs()).sum();
                format!("linear(d={}, l1={l1})", beta.len())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub distribution: InputDistribution,
    pub teacher: String,
    pub seed: u64,
    pub stream_id: u64,
}

/// Inputs (rows) with labels `y_i = f*(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Debug dump with header `x_1,…,x_d,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| LabError::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header: Vec<String> = (1..=self.dim()).map(|j| format!("x_{j}")).collect();
        writeln!(f, "{},y", header.join(",")).map_err(io)?;
        for (x, y) in self.inputs.iter_rows().zip(&self.labels) {
            let row: Vec<String> = x.iter().map(f64::to_string).collect();
            writeln!(f, "{},{y}", row.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

pub fn build_dataset(
    inputs: Matrix,
    teacher: &Teacher,
    distribution: InputDistribution,
    seed: u64,
    stream_id: u64,
) -> Result<Dataset> {
    let labels = inputs
        .iter_rows()
        .map(|x| teacher.evaluate(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        inputs,
        labels,
        meta: DatasetMeta {
            distribution,
            teacher: teacher.describe(),
            seed,
            stream_id,
        },
    })
}

/// Fresh samples from the same input distribution, labelled by `teacher`.
pub fn build_test_set(
    teacher: &Teacher,
    distribution: InputDistribution,
    n_test: usize,
    stream: &mut RngStream,
) -> Result<Dataset> {
    let inputs = distribution.sample(n_test, teacher.input_dim(), stream)?;
    build_dataset(inputs, teacher, distribution, stream.seed(), stream.stream_id())
}
