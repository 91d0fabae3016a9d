//! Decentralized linear sensor estimation:
//! `f_i(theta) = (1/n_i) sum_j ||z_ij - M_i theta||^2 + r_i ||theta||^2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{norm_sq_diff, DistributedProblem, GradientOracle, Optimum, ProblemError};
use crate::rng::{Purpose, RandomSource, StreamRng};

/// Largest acceptable condition number of the aggregate normal matrix when
/// generating instances.
const MAX_GENERATED_CONDITION: f64 = 1e6;
/// Above this the normal equations are treated as singular.
const MAX_SOLVE_CONDITION: f64 = 1e12;

/// One agent's measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorProblem {
    dim: usize,
    measurement_dim: usize,
    /// `M_i`, row-major `s x d`.
    matrix: Vec<f64>,
    /// `z_ij`, row-major `n x s`.
    measurements: Vec<f64>,
    regularization: f64,
    // Cached sufficient statistics.
    /// `M^T M + r I`, row-major `d x d`.
    hessian_half: Vec<f64>,
    /// `M^T z_j` per sample, row-major `n x d`.
    projected: Vec<f64>,
    /// Mean of `projected`.
    projected_mean: Vec<f64>,
    /// Mean of `||z_j||^2`.
    mean_sq_norm: f64,
}

impl SensorProblem {
    pub fn new(
        matrix: Vec<f64>,
        measurement_dim: usize,
        dim: usize,
        measurements: Vec<f64>,
        regularization: f64,
    ) -> Result<Self, ProblemError> {
        if matrix.len() != measurement_dim * dim {
            return Err(ProblemError::DimensionMismatch {
                expected: measurement_dim * dim,
                got: matrix.len(),
            });
        }
        if measurements.is_empty() || !measurements.len().is_multiple_of(measurement_dim) {
            return Err(ProblemError::InvalidSpec(format!(
                "{} measurement values do not form rows of length {measurement_dim}",
                measurements.len()
            )));
        }
        if !(regularization >= 0.0) {
            return Err(ProblemError::InvalidSpec(format!(
                "regularization must be nonnegative, got {regularization}"
            )));
        }
        let n = measurements.len() / measurement_dim;
        let (s, d) = (measurement_dim, dim);
        let mut hessian_half = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                hessian_half[a * d + b] =
                    (0..s).map(|r| matrix[r * d + a] * matrix[r * d + b]).sum();
            }
            hessian_half[a * d + a] += regularization;
        }
        let mut projected = vec![0.0; n * d];
        for j in 0..n {
            let z = &measurements[j * s..(j + 1) * s];
            for a in 0..d {
                projected[j * d + a] = (0..s).map(|r| matrix[r * d + a] * z[r]).sum();
            }
        }
        let mut projected_mean = vec![0.0; d];
        for j in 0..n {
            for a in 0..d {
                projected_mean[a] += projected[j * d + a];
            }
        }
        projected_mean.iter_mut().for_each(|v| *v /= n as f64);
        let mean_sq_norm = measurements.iter().map(|z| z * z).sum::<f64>() / n as f64;
        Ok(Self {
            dim,
            measurement_dim,
            matrix,
            measurements,
            regularization,
            hessian_half,
            projected,
            projected_mean,
            mean_sq_norm,
        })
    }

    pub fn measurement_dim(&self) -> usize {
        self.measurement_dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn measurements(&self) -> &[f64] {
        &self.measurements
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// `M^T M + r I`; the Hessian of `f_i` is twice this.
    pub fn hessian_half(&self) -> &[f64] {
        &self.hessian_half
    }

    /// `M^T z_bar`.
    pub fn projected_mean(&self) -> &[f64] {
        &self.projected_mean
    }

    /// Minimiser of this agent's own `f_i`: the estimate its data alone supports.
    pub fn local_optimum(&self) -> Result<Vec<f64>, ProblemError> {
        solve_spd(self.dim, &self.hessian_half, &self.projected_mean)
    }

    fn gradient_from_projection(&self, x: &[f64], projection: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|a| {
                let hx: f64 = (0..d).map(|b| self.hessian_half[a * d + b] * x[b]).sum();
                2.0 * (hx - projection[a])
            })
            .collect()
    }
}

impl GradientOracle for SensorProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_count(&self) -> usize {
        self.measurements.len() / self.measurement_dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut quad = 0.0;
        for a in 0..d {
            for b in 0..d {
                quad += x[a] * self.hessian_half[a * d + b] * x[b];
            }
        }
        let lin: f64 = x.iter().zip(&self.projected_mean).map(|(a, b)| a * b).sum();
        quad - 2.0 * lin + self.mean_sq_norm
    }

    fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient_from_projection(x, &self.projected_mean)
    }

    fn stochastic_gradient(&self, x: &[f64], batch: usize, rng: &mut StreamRng) -> Vec<f64> {
        let n = self.sample_count();
        if batch >= n {
            return self.full_gradient(x);
        }
        let d = self.dim;
        let mut proj = vec![0.0; d];
        for _ in 0..batch.max(1) {
            let j = rng.random_range(0..n);
            for a in 0..d {
                proj[a] += self.projected[j * d + a];
            }
        }
        let inv = 1.0 / batch.max(1) as f64;
        proj.iter_mut().for_each(|v| *v *= inv);
        self.gradient_from_projection(x, &proj)
    }

    /// Exact: `L = 2 lambda_max(M^T M + r I)` and
    /// `sigma_g^2 = (4/n) sum_j ||M^T (z_j - z_bar)||^2`, which does not
    /// depend on `x`.
    fn estimate_constants(&self, _sample_count: usize, _rng: &mut StreamRng) -> (f64, f64) {
        let d = self.dim;
        let h = DMatrix::from_row_slice(d, d, &self.hessian_half);
        let eig = SymmetricEigen::new(h);
        let lmax = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let n = self.sample_count();
        let var = (0..n)
            .map(|j| norm_sq_diff(&self.projected[j * d..(j + 1) * d], &self.projected_mean))
            .sum::<f64>()
            * 4.0
            / n as f64;
        (2.0 * lmax, var)
    }
}

/// Generator settings. Defaults: five agents, 100 measurements of length 3,
/// two unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub agents: usize,
    pub samples_per_agent: usize,
    pub measurement_dim: usize,
    pub dim: usize,
    pub regularization: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            agents: 5,
            samples_per_agent: 100,
            measurement_dim: 3,
            dim: 2,
            regularization: 0.1,
        }
    }
}

/// A generated (or imported) set of sensor problems with its exact optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorNetwork {
    locals: Vec<SensorProblem>,
    theta_true: Option<Vec<f64>>,
    optimum: Optimum,
    /// `(1/m) sum_i (M_i^T M_i + r_i I)`; `F(x) - F* = (x - x*)^T H (x - x*)`.
    hessian_half: Vec<f64>,
}

impl SensorNetwork {
    pub fn new(locals: Vec<SensorProblem>) -> Result<Self, ProblemError> {
        Self::with_truth(locals, None)
    }

    fn with_truth(
        locals: Vec<SensorProblem>,
        theta_true: Option<Vec<f64>>,
    ) -> Result<Self, ProblemError> {
        if locals.is_empty() {
            return Err(ProblemError::InvalidSpec("no agents".into()));
        }
        let d = locals[0].dim;
        for p in &locals {
            if p.dim != d {
                return Err(ProblemError::DimensionMismatch {
                    expected: d,
                    got: p.dim,
                });
            }
        }
        let point = closed_form_optimum(&locals)?;
        let m = locals.len() as f64;
        let mut hessian_half = vec![0.0; d * d];
        for p in &locals {
            for (a, b) in hessian_half.iter_mut().zip(&p.hessian_half) {
                *a += b / m;
            }
        }
        let value = locals.iter().map(|f| f.value(&point)).sum::<f64>() / m;
        Ok(Self {
            locals,
            theta_true,
            optimum: Optimum { point, value },
            hessian_half,
        })
    }

    /// Parameter the measurements were generated from. Measurement noise is
    /// not zero-mean, so this is not the optimum.
    pub fn theta_true(&self) -> Option<&[f64]> {
        self.theta_true.as_deref()
    }

    pub fn theta_star(&self) -> &[f64] {
        &self.optimum.point
    }

    /// One row per measurement: `agent, m_0..m_{s*d}, z_0..z_s, r`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        let first = &self.locals[0];
        let (s, d) = (first.measurement_dim, first.dim);
        let mut header = vec!["agent".to_string()];
        header.extend((0..s * d).map(|i| format!("m{i}")));
        header.extend((0..s).map(|i| format!("z{i}")));
        header.push("r".into());
        header.push("d".into());
        w.write_record(&header)?;
        for (agent, p) in self.locals.iter().enumerate() {
            for row in p.measurements.chunks(s) {
                let mut rec = vec![agent.to_string()];
                rec.extend(p.matrix.iter().map(|v| format!("{v:?}")));
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                rec.push(format!("{:?}", p.regularization));
                rec.push(d.to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`SensorNetwork::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, ProblemError> {
        let bad = |e: String| ProblemError::InvalidSpec(e);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let s = headers.iter().filter(|h| h.starts_with('z')).count();
        let sd = headers.iter().filter(|h| h.starts_with('m')).count();
        let mut grouped: Vec<(Vec<f64>, Vec<f64>, f64, usize)> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(e.to_string()))?;
            let agent = nums[0] as usize;
            let d = nums[1 + sd + s + 1] as usize;
            if agent == grouped.len() {
                grouped.push((nums[1..1 + sd].to_vec(), Vec::new(), nums[1 + sd + s], d));
            } else if agent + 1 != grouped.len() {
                return Err(bad(format!("rows for agent {agent} are not contiguous")));
            }
            grouped[agent]
                .1
                .extend_from_slice(&nums[1 + sd..1 + sd + s]);
        }
        let locals = grouped
            .into_iter()
            .map(|(m, z, reg, d)| SensorProblem::new(m, s, d, z, reg))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(locals)
    }
}

impl DistributedProblem for SensorNetwork {
    type Local = SensorProblem;

    fn locals(&self) -> &[SensorProblem] {
        &self.locals
    }

    fn optimum(&self) -> Option<&Optimum> {
        Some(&self.optimum)
    }

    /// Exact quadratic form `(x - x*)^T H (x - x*)`; avoids cancellation.
    fn objective_gap(&self, x: &[f64]) -> Option<f64> {
        let d = x.len();
        let e: Vec<f64> = x
            .iter()
            .zip(&self.optimum.point)
            .map(|(a, b)| a - b)
            .collect();
        let mut q = 0.0;
        for a in 0..d {
            for b in 0..d {
                q += e[a] * self.hessian_half[a * d + b] * e[b];
            }
        }
        Some(q)
    }
}

/// Draws `m` agents with `M_i` entries `U[-1, 1]`, `theta_true ~ U[-1, 1]^d`
/// and measurement noise `U[0, 1]` per entry. Measurement matrices are
/// redrawn while the aggregate normal matrix is badly conditioned.
pub fn generate_sensor_data(
    spec: &SensorSpec,
    source: &RandomSource,
) -> Result<SensorNetwork, ProblemError> {
    let SensorSpec {
        agents,
        samples_per_agent: n,
        measurement_dim: s,
        dim: d,
        regularization,
    } = *spec;
    if agents == 0 || n == 0 || s == 0 || d == 0 {
        return Err(ProblemError::InvalidSpec(format!(
            "all sizes must be positive: {spec:?}"
        )));
    }
    let mut truth_rng = source.rng(agents, 0, Purpose::Data);
    let theta_true: Vec<f64> = (0..d).map(|_| truth_rng.random_range(-1.0..=1.0)).collect();
    for attempt in 0..100u64 {
        let matrices: Vec<Vec<f64>> = (0..agents)
            .map(|i| {
                let mut rng = source.rng(i, 2 * attempt, Purpose::Data);
                (0..s * d).map(|_| rng.random_range(-1.0..=1.0)).collect()
            })
            .collect();
        let mut normal = DMatrix::<f64>::zeros(d, d);
        for m in &matrices {
            let mm = DMatrix::from_row_slice(s, d, m);
            normal += mm.transpose() * &mm + DMatrix::identity(d, d) * regularization;
        }
        if condition_number(&normal) > MAX_GENERATED_CONDITION {
            continue;
        }
        let mut locals = Vec::with_capacity(agents);
        for (i, m) in matrices.into_iter().enumerate() {
            let mut rng = source.rng(i, 2 * attempt + 1, Purpose::Data);
            let mut z = Vec::with_capacity(n * s);
            for _ in 0..n {
                for r in 0..s {
                    let clean: f64 = (0..d).map(|c| m[r * d + c] * theta_true[c]).sum();
                    z.push(clean + rng.random::<f64>());
                }
            }
            locals.push(SensorProblem::new(m, s, d, z, regularization)?);
        }
        return SensorNetwork::with_truth(locals, Some(theta_true));
    }
    Err(ProblemError::InvalidSpec(
        "could not draw a well-conditioned instance in 100 attempts".into(),
    ))
}

/// Solves `sum_i (M_i^T M_i + r_i I) theta = sum_i M_i^T z_bar_i`, the
/// first-order condition of the aggregate objective.
pub fn closed_form_optimum(problems: &[SensorProblem]) -> Result<Vec<f64>, ProblemError> {
    let d = problems
        .first()
        .map(|p| p.dim)
        .ok_or_else(|| ProblemError::InvalidSpec("no agents".into()))?;
    let mut lhs = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for p in problems {
        for (a, b) in lhs.iter_mut().zip(&p.hessian_half) {
            *a += b;
        }
        for (a, b) in rhs.iter_mut().zip(&p.projected_mean) {
            *a += b;
        }
    }
    solve_spd(d, &lhs, &rhs)
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Symmetric solve with one step of iterative refinement.
fn solve_spd(d: usize, a: &[f64], b: &[f64]) -> Result<Vec<f64>, ProblemError> {
    let am = DMatrix::from_row_slice(d, d, a);
    let cond = condition_number(&am);
    if !(cond <= MAX_SOLVE_CONDITION) {
        return Err(ProblemError::SingularSystem(cond));
    }
    let lu = am.clone().lu();
    let bv = DVector::from_column_slice(b);
    let mut x = lu.solve(&bv).ok_or(ProblemError::SingularSystem(cond))?;
    let residual = &bv - &am * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    Ok(x.iter().copied().collect())
}
