//! Local objectives with stochastic gradient oracles.

mod mlp;
mod sensor;

use rand::Rng;
use thiserror::Error;

use crate::rng::StreamRng;

pub use mlp::{generate_blob_data, BlobSpec, ClassifierNetwork, Dataset, MlpNetwork, MlpProblem};
pub use sensor::{
    closed_form_optimum, generate_sensor_data, SensorNetwork, SensorProblem, SensorSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("aggregate normal matrix is singular or ill-conditioned (condition number {0:e})")]
    SingularSystem(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),
}

/// Local objective `f_i` of one agent together with its gradient oracle.
pub trait GradientOracle: Send + Sync {
    /// Dimension `d` of the decision variable.
    fn dim(&self) -> usize;

    /// Number of local samples `n_i`.
    fn sample_count(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn full_gradient(&self, x: &[f64]) -> Vec<f64>;

    /// Minibatch gradient with indices drawn uniformly with replacement. A
    /// batch of at least `n_i` uses every sample once and is exact.
    fn stochastic_gradient(&self, x: &[f64], batch: usize, rng: &mut StreamRng) -> Vec<f64>;

    /// `(L, sigma_g^2)` for batch-1 gradients. The default samples random
    /// pairs in `[-1, 1]^d`; quadratic objectives override with exact values.
    fn estimate_constants(&self, sample_count: usize, rng: &mut StreamRng) -> (f64, f64) {
        sampled_constants(self, sample_count, rng)
    }
}

pub(crate) fn sampled_constants<O: GradientOracle + ?Sized>(
    oracle: &O,
    sample_count: usize,
    rng: &mut StreamRng,
) -> (f64, f64) {
    assert!(sample_count >= 2, "need at least two probes");
    let d = oracle.dim();
    let mut lipschitz: f64 = 0.0;
    let mut variance: f64 = 0.0;
    let draws_per_point = 32;
    for _ in 0..sample_count {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let gx = oracle.full_gradient(&x);
        let gy = oracle.full_gradient(&y);
        let num = norm_sq_diff(&gx, &gy).sqrt();
        let den = norm_sq_diff(&x, &y).sqrt();
        if den > 0.0 {
            lipschitz = lipschitz.max(num / den);
        }
        for _ in 0..draws_per_point {
            let g = oracle.stochastic_gradient(&x, 1, rng);
            variance = variance.max(norm_sq_diff(&g, &gx));
        }
    }
    (lipschitz, variance)
}

pub(crate) fn norm_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Exact optimum of the aggregate objective, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub point: Vec<f64>,
    pub value: f64,
}

/// Classification quality of a model, for problems that have one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub train_loss: f64,
    pub train: f64,
    pub validation: f64,
}

/// Network-level view: one local objective per agent plus whatever global
/// reference quantities the problem can provide.
pub trait DistributedProblem: Sync {
    type Local: GradientOracle;

    fn locals(&self) -> &[Self::Local];

    fn agents(&self) -> usize {
        self.locals().len()
    }

    fn dim(&self) -> usize {
        self.locals()[0].dim()
    }

    fn optimum(&self) -> Option<&Optimum> {
        None
    }

    /// Whether [`DistributedProblem::accuracy`] returns values.
    fn reports_accuracy(&self) -> bool {
        false
    }

    fn accuracy(&self, _x: &[f64]) -> Option<Accuracy> {
        None
    }

    /// `F(x) - F(theta*)`, when the optimum is known.
    fn objective_gap(&self, x: &[f64]) -> Option<f64> {
        self.optimum().map(|o| self.aggregate_value(x) - o.value)
    }

    /// `F(x) = (1/m) sum_i f_i(x)`.
    fn aggregate_value(&self, x: &[f64]) -> f64 {
        self.locals().iter().map(|f| f.value(x)).sum::<f64>() / self.agents() as f64
    }

    /// `grad F(x)`.
    fn aggregate_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for f in self.locals() {
            for (a, b) in g.iter_mut().zip(f.full_gradient(x)) {
                *a += b;
            }
        }
        let inv = 1.0 / self.agents() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    /// `grad F(x)` together with [`DistributedProblem::accuracy`]; problems
    /// can share work between the two.
    fn gradient_and_accuracy(&self, x: &[f64]) -> (Vec<f64>, Option<Accuracy>) {
        (self.aggregate_gradient(x), self.accuracy(x))
    }
}
