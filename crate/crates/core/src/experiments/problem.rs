//! Building a problem instance from its config and a seed.

use crate::data::{
    build_dataset, build_test_set, make_teacher_linear, make_teacher_relu, sparse_ones, Dataset,
    Teacher,
};
use crate::error::Result;
use crate::models::ModelParams;
use crate::numerics::RngStream;
use crate::optim::{init_diag, init_relu};

use super::config::ProblemConfig;

/// Stream ids; each seed owns one stream per role.
pub const STREAM_TEACHER: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_TEST: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SGD: u64 = 4;
/// Parameter draws of the norm-equivalence suites.
pub const STREAM_DRAWS: u64 = 5;

#[derive(Debug, Clone)]
pub struct Problem {
    pub seed: u64,
    pub teacher: Teacher,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub init: ModelParams,
}

impl Problem {
    pub fn build(config: &ProblemConfig, seed: u64) -> Result<Self> {
        let stream = |id| RngStream::new(seed, id);
        let (teacher, dist, n, n_test) = match config {
            ProblemConfig::Relu(p) => (
                make_teacher_relu(p.teacher_width, p.input_dim, &mut stream(STREAM_TEACHER))?,
                p.distribution,
                p.n_train,
                p.n_test,
            ),
            ProblemConfig::Diag(p) => (
                make_teacher_linear(sparse_ones(p.input_dim, p.support))?,
                p.distribution,
                p.n_train,
                p.n_test,
            ),
        };
        let d = config.input_dim();
        let inputs = dist.sample(n, d, &mut stream(STREAM_TRAIN))?;
        let train = build_dataset(inputs, &teacher, dist, seed, STREAM_TRAIN)?;
        let test = match n_test {
            0 => None,
            n_test => Some(build_test_set(&teacher, dist, n_test, &mut stream(STREAM_TEST))?),
        };
        let init = match config {
            ProblemConfig::Relu(p) => {
                ModelParams::Relu(init_relu(p.width, p.input_dim, &mut stream(STREAM_INIT))?)
            }
            ProblemConfig::Diag(p) => ModelParams::Diag(init_diag(
                p.input_dim,
                p.init_var_a,
                p.init_var_b,
                &mut stream(STREAM_INIT),
            )?),
        };
        Ok(Problem {
            seed,
            teacher,
            train,
            test,
            init,
        })
    }

    /// Diagonal init `a ~ N(0, var_a)`, `b ~ N(0, var_b)` on this seed's init stream.
    pub fn diag_init(&self, dim: usize, var_a: f64, var_b: f64) -> Result<ModelParams> {
        let mut stream = RngStream::new(self.seed, STREAM_INIT);
        Ok(ModelParams::Diag(init_diag(dim, var_a, var_b, &mut stream)?))
    }

    pub fn sgd_stream(&self) -> RngStream {
        RngStream::new(self.seed, STREAM_SGD)
    }
}
