//! Multi-round simulation, per-round metrics and aggregation over
//! repetitions.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    conventional_round, initial_state, private_round, Algorithm, ConventionalRound, DsgdError,
    Message, NetworkState, PrivateRound,
};
use crate::problems::{norm_sq, DistributedProblem, GradientOracle};
use crate::rng::RandomSource;
use crate::topology::CouplingMatrix;

/// Metric columns recorded for `problem`, in CSV order.
pub fn metric_names<P: DistributedProblem>(problem: &P) -> Vec<&'static str> {
    let mut names = vec!["consensus_err"];
    if problem.optimum().is_some() {
        names.extend(["mean_opt_gap", "obj_gap"]);
    }
    names.extend(["grad_norm_mean", "grad_norm_avgfield", "lambda_bar_mean"]);
    if problem.reports_accuracy() {
        names.extend(["train_loss", "train_accuracy", "validation_accuracy"]);
    }
    names
}

fn measure<P: DistributedProblem>(problem: &P, state: &NetworkState, lambda_bar: f64) -> Vec<f64> {
    let mean = state.mean();
    let mut row = vec![state.consensus_error()];
    if let Some(opt) = problem.optimum() {
        let gap: f64 = mean
            .iter()
            .zip(&opt.point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        row.push(gap);
        row.push(problem.objective_gap(mean).unwrap_or(f64::NAN));
    }
    let (gradient, accuracy) = problem.gradient_and_accuracy(mean);
    row.push(norm_sq(&gradient));
    let mut field = vec![0.0; state.dim()];
    for (i, f) in problem.locals().iter().enumerate() {
        for (a, g) in field.iter_mut().zip(f.full_gradient(state.iterate(i))) {
            *a += g;
        }
    }
    let m = state.agents() as f64;
    row.push(norm_sq(&field) / (m * m));
    row.push(lambda_bar);
    if let Some(acc) = accuracy {
        row.extend([acc.train_loss, acc.train, acc.validation]);
    }
    row
}

/// Per-iteration metric series of one run; row `k` describes state `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    names: Vec<&'static str>,
    columns: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(names: Vec<&'static str>) -> Self {
        let columns = vec![Vec::new(); names.len()];
        Self { names, columns }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.push(*v);
        }
    }

    /// Number of rows (horizon + 1).
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn consensus_err(&self) -> &[f64] {
        self.column("consensus_err").expect("always recorded")
    }

    pub fn lambda_bar_mean(&self) -> &[f64] {
        self.column("lambda_bar_mean").expect("always recorded")
    }

    /// `k` followed by every metric, full-precision decimals.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        write_columns(out, &self.names, &self.columns)
    }
}

fn write_columns<W: std::io::Write>(
    out: W,
    names: &[&str],
    columns: &[Vec<f64>],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k"];
    header.extend(names);
    w.write_record(&header)?;
    let rows = columns.first().map_or(0, Vec::len);
    for k in 0..rows {
        let mut rec = vec![k.to_string()];
        rec.extend(columns.iter().map(|c| format!("{:?}", c[k])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// What one round produced.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundRecord {
    Private(PrivateRound),
    Conventional(ConventionalRound),
}

impl RoundRecord {
    pub fn next(&self) -> &NetworkState {
        match self {
            Self::Private(r) => &r.next,
            Self::Conventional(r) => &r.next,
        }
    }
}

/// Step-by-step driver over a fixed problem, coupling and algorithm.
pub struct Simulation<'a, P: DistributedProblem> {
    problem: &'a P,
    coupling: &'a CouplingMatrix,
    algorithm: Algorithm,
    source: RandomSource,
    noise_sign: f64,
    state: NetworkState,
}

impl<'a, P: DistributedProblem> Simulation<'a, P> {
    /// Starts from `x_i^0 ~ U[-1, 1]^d`.
    pub fn new(
        problem: &'a P,
        coupling: &'a CouplingMatrix,
        algorithm: Algorithm,
        source: RandomSource,
    ) -> Result<Self, DsgdError> {
        let state = initial_state(problem.agents(), problem.dim(), &source);
        Self::from_state(problem, coupling, algorithm, source, state)
    }

    pub fn from_state(
        problem: &'a P,
        coupling: &'a CouplingMatrix,
        algorithm: Algorithm,
        source: RandomSource,
        state: NetworkState,
    ) -> Result<Self, DsgdError> {
        algorithm.validate()?;
        if coupling.agents() != problem.agents() {
            return Err(DsgdError::DimensionMismatch {
                expected: problem.agents(),
                got: coupling.agents(),
            });
        }
        Ok(Self {
            problem,
            coupling,
            algorithm,
            source,
            noise_sign: 1.0,
            state,
        })
    }

    /// Sign applied to injected gradient noise.
    pub fn with_noise_sign(mut self, sign: f64) -> Self {
        self.noise_sign = sign;
        self
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    /// Mean over agents of the stepsize mean the next round will use.
    pub fn next_lambda_bar(&self) -> f64 {
        let k = self.state.iteration() + 1;
        match &self.algorithm {
            Algorithm::Private(p) => {
                let m = self.problem.agents();
                (0..m)
                    .map(|j| p.stepsize.mean(j, k, &self.source))
                    .sum::<f64>()
                    / m as f64
            }
            Algorithm::Conventional(c) => c.schedule.public_mean(k),
        }
    }

    pub fn step(&mut self) -> Result<RoundRecord, DsgdError> {
        let record = match &self.algorithm {
            Algorithm::Private(p) => RoundRecord::Private(private_round(
                &self.state,
                self.coupling,
                p,
                self.problem,
                &self.source,
                self.noise_sign,
            )?),
            Algorithm::Conventional(c) => {
                let lambda = c.schedule.public_mean(self.state.iteration() + 1);
                RoundRecord::Conventional(conventional_round(
                    &self.state,
                    self.coupling,
                    lambda,
                    c.batch,
                    self.problem,
                    &self.source,
                )?)
            }
        };
        self.state = record.next().clone();
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub horizon: u64,
    /// Keep every state (memory heavy).
    pub record_state: bool,
    /// Keep every transmitted private message.
    pub log_messages: bool,
    /// Keep every agent's true stochastic gradient, keyed by
    /// `(iteration, agent)`.
    pub record_gradients: bool,
    /// Pair repetitions `2p` and `2p + 1`: same random streams, opposite sign
    /// of injected gradient noise.
    pub antithetic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            horizon: 1000,
            record_state: false,
            log_messages: false,
            record_gradients: false,
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub messages: Option<Vec<Message>>,
    pub states: Option<Vec<NetworkState>>,
    pub gradients: Option<BTreeMap<(u64, usize), Vec<f64>>>,
}

/// One run of `options.horizon` rounds from the default initial state.
pub fn run_single<P: DistributedProblem>(
    problem: &P,
    coupling: &CouplingMatrix,
    algorithm: Algorithm,
    source: RandomSource,
    noise_sign: f64,
    options: &RunOptions,
) -> Result<RunOutput, DsgdError> {
    let mut sim =
        Simulation::new(problem, coupling, algorithm, source)?.with_noise_sign(noise_sign);
    let mut trajectory = Trajectory::new(metric_names(problem));
    let mut messages = options.log_messages.then(Vec::new);
    let mut states = options.record_state.then(Vec::new);
    let mut gradients = options.record_gradients.then(BTreeMap::new);
    for _ in 0..options.horizon {
        trajectory.push_row(&measure(problem, sim.state(), sim.next_lambda_bar()));
        if let Some(s) = states.as_mut() {
            s.push(sim.state().clone());
        }
        let record = sim.step()?;
        let k = record.next().iteration();
        if let Some(g) = gradients.as_mut() {
            match &record {
                RoundRecord::Private(r) => {
                    g.extend(r.draws.iter().map(|d| ((k, d.agent), d.gradient.clone())));
                }
                RoundRecord::Conventional(r) => {
                    g.extend(
                        r.gradients
                            .iter()
                            .cloned()
                            .enumerate()
                            .map(|(i, v)| ((k, i), v)),
                    );
                }
            }
        }
        if let (Some(log), RoundRecord::Private(r)) = (messages.as_mut(), record) {
            log.extend(r.messages);
        }
    }
    trajectory.push_row(&measure(problem, sim.state(), sim.next_lambda_bar()));
    if let Some(s) = states.as_mut() {
        s.push(sim.state().clone());
    }
    Ok(RunOutput {
        trajectory,
        messages,
        states,
        gradients,
    })
}

/// `repetitions` independent runs, evaluated in parallel on the current
/// rayon pool and returned in repetition order.
pub fn run_repetitions<P: DistributedProblem>(
    problem: &P,
    coupling: &CouplingMatrix,
    algorithm: Algorithm,
    source: RandomSource,
    repetitions: usize,
    options: &RunOptions,
) -> Result<Vec<RunOutput>, DsgdError> {
    (0..repetitions as u64)
        .into_par_iter()
        .map(|r| {
            let (src, sign) = if options.antithetic {
                (
                    source.for_repetition(r / 2),
                    if r % 2 == 0 { 1.0 } else { -1.0 },
                )
            } else {
                (source.for_repetition(r), 1.0)
            };
            run_single(problem, coupling, algorithm, src, sign, options)
        })
        .collect()
}

/// Per-iteration mean and standard error across repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub names: Vec<&'static str>,
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation over `sqrt(R)`; zero when `R = 1`.
    pub stderr: Vec<Vec<f64>>,
    pub repetitions: usize,
}

impl AggregateResult {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.mean[i].as_slice())
    }

    pub fn stderr_column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.stderr[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        write_columns(out, &self.names, &self.mean)
    }

    pub fn write_stderr_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        write_columns(out, &self.names, &self.stderr)
    }
}

/// Sums run in repetition order, so the result does not depend on how the
/// runs were scheduled.
pub fn aggregate<'t>(runs: impl IntoIterator<Item = &'t Trajectory>) -> AggregateResult {
    let runs: Vec<&Trajectory> = runs.into_iter().collect();
    assert!(!runs.is_empty(), "nothing to aggregate");
    let names = runs[0].names.clone();
    let r = runs.len() as f64;
    let mut mean = Vec::with_capacity(names.len());
    let mut stderr = Vec::with_capacity(names.len());
    for c in 0..names.len() {
        let len = runs[0].columns[c].len();
        let mut mu = vec![0.0; len];
        for t in &runs {
            for (a, v) in mu.iter_mut().zip(&t.columns[c]) {
                *a += v;
            }
        }
        mu.iter_mut().for_each(|v| *v /= r);
        let mut se = vec![0.0; len];
        if runs.len() > 1 {
            for t in &runs {
                for ((s, v), m) in se.iter_mut().zip(&t.columns[c]).zip(&mu) {
                    *s += (v - m) * (v - m);
                }
            }
            se.iter_mut()
                .for_each(|v| *v = (*v / (r - 1.0)).sqrt() / r.sqrt());
        }
        mean.push(mu);
        stderr.push(se);
    }
    AggregateResult {
        names,
        mean,
        stderr,
        repetitions: runs.len(),
    }
}
