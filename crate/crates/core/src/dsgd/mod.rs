//! Decentralized SGD rounds.
//!
//! In the private round every agent `j` sends
//! `v_ij = w_ij x_j - b_ij Lambda_j g_j` to each neighbour `i`, keeps `v_jj`
//! for itself, and sets `x_i <- sum_{j in N_i} v_ij`. The conventional round
//! shares `x_j` in full and applies a public stepsize locally.
//!
//! States are counted from zero: the round applied to state `k` uses
//! schedule iteration `k + 1`, so the first update sees `k = 1`.

mod certificate;
mod run;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{DistributedProblem, GradientOracle, ProblemError};
use crate::randomization::{
    draw_stepsize_matrix, mean_stepsize, sample_mixing_column, MixingColumn, StepsizeMatrix,
    StepsizeMode, StepsizeSchedule,
};
use crate::rng::{Purpose, RandomSource};
use crate::topology::{CouplingMatrix, TopologyError};

pub use certificate::{recursion_certificate, CertificateReport};
pub use run::{
    aggregate, metric_names, run_repetitions, run_single, AggregateResult, RoundRecord, RunOptions,
    RunOutput, Simulation, Trajectory,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsgdError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("invalid algorithm parameters: {0}")]
    InvalidParameters(String),
}

/// Iterates of all agents after some number of rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    iteration: u64,
    iterates: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl NetworkState {
    pub fn new(iteration: u64, iterates: Vec<Vec<f64>>) -> Result<Self, DsgdError> {
        let d = iterates.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = iterates.iter().find(|x| x.len() != d) {
            return Err(DsgdError::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let mean = mean_of(&iterates, d);
        Ok(Self {
            iteration,
            iterates,
            mean,
        })
    }

    /// Rounds completed so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn agents(&self) -> usize {
        self.iterates.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn iterate(&self, agent: usize) -> &[f64] {
        &self.iterates[agent]
    }

    pub fn iterates(&self) -> &[Vec<f64>] {
        &self.iterates
    }

    /// Cached `x_bar`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `sum_i ||x_i - x_bar||^2`.
    pub fn consensus_error(&self) -> f64 {
        self.iterates
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&self.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest deviation between the cached mean and a fresh recomputation.
    pub fn mean_cache_error(&self) -> f64 {
        mean_of(&self.iterates, self.dim())
            .iter()
            .zip(&self.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn mean_of(iterates: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for x in iterates {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    let inv = 1.0 / iterates.len().max(1) as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// `x_i^0 ~ U[-1, 1]^d`, independently per agent.
pub fn initial_state(agents: usize, dim: usize, source: &RandomSource) -> NetworkState {
    let iterates = (0..agents)
        .map(|i| {
            let mut rng = source.rng(i, 0, Purpose::Initialization);
            (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
        })
        .collect();
    NetworkState::new(0, iterates).expect("uniform dimensions")
}

/// How `Lambda_j^k` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepsizeRule {
    /// Private random diagonal matrix.
    Random {
        schedule: StepsizeSchedule,
        #[serde(default)]
        mode: StepsizeMode,
    },
    /// `lambda^k I` with the schedule's public mean.
    Deterministic { schedule: StepsizeSchedule },
}

impl StepsizeRule {
    pub fn schedule(&self) -> &StepsizeSchedule {
        match self {
            Self::Random { schedule, .. } | Self::Deterministic { schedule } => schedule,
        }
    }

    pub fn draw(&self, agent: usize, k: u64, dim: usize, source: &RandomSource) -> StepsizeMatrix {
        match *self {
            Self::Random { schedule, mode } => {
                draw_stepsize_matrix(&schedule, mode, agent, k, dim, source)
            }
            Self::Deterministic { schedule } => {
                StepsizeMatrix::scalar(agent, k, schedule.public_mean(k), dim)
            }
        }
    }

    /// `lambda_bar_j^k` without drawing the matrix.
    pub fn mean(&self, agent: usize, k: u64, source: &RandomSource) -> f64 {
        match *self {
            Self::Random {
                schedule,
                mode: StepsizeMode::DrawAroundMean,
            } => mean_stepsize(&schedule, agent, k, source),
            Self::Random { schedule, .. } | Self::Deterministic { schedule } => {
                schedule.public_mean(k)
            }
        }
    }
}

/// How the column `b_{.j}^k` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingRule {
    /// Fresh normalised uniform draws every round.
    #[default]
    Random,
    /// `1/|N_j|`.
    Uniform,
    /// `b_ij = w_ij`, the coupling column itself.
    Coupling,
}

/// Parameters of the obfuscated update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivateParams {
    pub stepsize: StepsizeRule,
    pub mixing: MixingRule,
    /// Minibatch size per gradient evaluation.
    pub batch: usize,
    /// Standard deviation of additive Gaussian gradient noise; 0 disables it.
    pub gradient_noise: f64,
}

impl PrivateParams {
    /// Random stepsizes around the reference schedule and random mixing.
    pub fn standard(schedule: StepsizeSchedule) -> Self {
        Self {
            stepsize: StepsizeRule::Random {
                schedule,
                mode: StepsizeMode::DrawAroundMean,
            },
            mixing: MixingRule::Random,
            batch: 1,
            gradient_noise: 0.0,
        }
    }

    /// Noise-injection scheme: `b_ij = 1/|N_j|`, `Lambda = lambda^k I`, Gaussian noise.
    pub fn noise_injection(schedule: StepsizeSchedule, gradient_noise: f64) -> Self {
        Self {
            stepsize: StepsizeRule::Deterministic { schedule },
            mixing: MixingRule::Uniform,
            batch: 1,
            gradient_noise,
        }
    }
}

/// Parameters of the baseline `x_i <- sum_j w_ij x_j - lambda^k g_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConventionalParams {
    /// Only the public mean is used.
    pub schedule: StepsizeSchedule,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum Algorithm {
    Private(PrivateParams),
    Conventional(ConventionalParams),
}

impl Algorithm {
    pub fn validate(&self) -> Result<(), DsgdError> {
        let (schedule, batch) = match self {
            Self::Private(p) => {
                if !(p.gradient_noise >= 0.0 && p.gradient_noise.is_finite()) {
                    return Err(DsgdError::InvalidParameters(format!(
                        "gradient noise {} must be finite and nonnegative",
                        p.gradient_noise
                    )));
                }
                (p.stepsize.schedule(), p.batch)
            }
            Self::Conventional(c) => (&c.schedule, c.batch),
        };
        if batch == 0 {
            return Err(DsgdError::InvalidParameters(
                "batch must be at least 1".into(),
            ));
        }
        schedule.validate().map_err(DsgdError::InvalidParameters)
    }
}

/// A vector sent (or kept) during a private round.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    /// Schedule iteration `k` of the round.
    pub iteration: u64,
    pub sender: usize,
    pub receiver: usize,
    pub payload: Vec<f64>,
}

/// Everything agent `j` drew privately in one round. Never part of what an
/// observer receives.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDraw {
    pub agent: usize,
    /// Stochastic gradient `g_j^k` before any injected noise.
    pub gradient: Vec<f64>,
    /// Injected noise (all zeros when disabled).
    pub noise: Vec<f64>,
    pub stepsize: StepsizeMatrix,
    pub mixing: MixingColumn,
}

impl AgentDraw {
    /// `Lambda_j (g_j + xi_j)`: the total step agent `j` distributes.
    pub fn step(&self) -> Vec<f64> {
        self.stepsize
            .diag
            .iter()
            .zip(self.gradient.iter().zip(&self.noise))
            .map(|(l, (g, n))| l * (g + n))
            .collect()
    }
}

/// Output of [`private_round`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateRound {
    pub next: NetworkState,
    /// Transmitted `v_ij`, `i != j`, ordered by sender then receiver.
    pub messages: Vec<Message>,
    /// Self contributions `v_jj`, never transmitted.
    pub retained: Vec<Message>,
    pub draws: Vec<AgentDraw>,
}

/// Output of [`conventional_round`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConventionalRound {
    pub next: NetworkState,
    /// Public stepsize applied this round.
    pub stepsize: f64,
    /// Ground-truth gradients.
    pub gradients: Vec<Vec<f64>>,
}

fn check_shapes<P: DistributedProblem>(
    state: &NetworkState,
    coupling: &CouplingMatrix,
    problem: &P,
) -> Result<(), DsgdError> {
    if coupling.agents() != problem.agents() {
        return Err(DsgdError::DimensionMismatch {
            expected: problem.agents(),
            got: coupling.agents(),
        });
    }
    if state.agents() != problem.agents() {
        return Err(DsgdError::DimensionMismatch {
            expected: problem.agents(),
            got: state.agents(),
        });
    }
    if state.dim() != problem.dim() {
        return Err(DsgdError::DimensionMismatch {
            expected: problem.dim(),
            got: state.dim(),
        });
    }
    Ok(())
}

/// Agent `j`'s stochastic gradient and optional injected noise for round `k`.
fn local_gradient<P: DistributedProblem>(
    problem: &P,
    agent: usize,
    k: u64,
    x: &[f64],
    batch: usize,
    noise_std: f64,
    noise_sign: f64,
    source: &RandomSource,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = source.rng(agent, k, Purpose::Gradient);
    let g = problem.locals()[agent].stochastic_gradient(x, batch, &mut rng);
    let noise = if noise_std > 0.0 {
        let mut rng = source.rng(agent, k, Purpose::DpNoise);
        (0..g.len())
            .map(|_| noise_sign * noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        vec![0.0; g.len()]
    };
    (g, noise)
}

/// One synchronous round of the obfuscated update. `noise_sign` flips the
/// injected noise (used for antithetic repetition pairs); pass 1.0 otherwise.
pub fn private_round<P: DistributedProblem>(
    state: &NetworkState,
    coupling: &CouplingMatrix,
    params: &PrivateParams,
    problem: &P,
    source: &RandomSource,
    noise_sign: f64,
) -> Result<PrivateRound, DsgdError> {
    check_shapes(state, coupling, problem)?;
    let m = state.agents();
    let d = state.dim();
    let k = state.iteration + 1;
    let graph = coupling.graph();
    let mut messages = Vec::with_capacity(graph.message_count());
    let mut retained = Vec::with_capacity(m);
    let mut draws = Vec::with_capacity(m);
    for j in 0..m {
        let xj = state.iterate(j);
        let (gradient, noise) = local_gradient(
            problem,
            j,
            k,
            xj,
            params.batch,
            params.gradient_noise,
            noise_sign,
            source,
        );
        let stepsize = params.stepsize.draw(j, k, d, source);
        let neighbors = graph.neighbors(j);
        let mixing = match params.mixing {
            MixingRule::Random => {
                sample_mixing_column(j, neighbors, &mut source.rng(j, k, Purpose::Mixing))
            }
            MixingRule::Uniform => MixingColumn::uniform(j, neighbors),
            MixingRule::Coupling => {
                let raw: Vec<f64> = neighbors.iter().map(|&i| coupling.weight(i, j)).collect();
                MixingColumn::proportional(j, neighbors, &raw)
            }
        };
        let draw = AgentDraw {
            agent: j,
            gradient,
            noise,
            stepsize,
            mixing,
        };
        let step = draw.step();
        for &(i, b) in &draw.mixing.weights {
            let w = coupling.weight(i, j);
            let payload = xj.iter().zip(&step).map(|(x, s)| w * x - b * s).collect();
            let msg = Message {
                iteration: k,
                sender: j,
                receiver: i,
                payload,
            };
            if i == j {
                retained.push(msg);
            } else {
                messages.push(msg);
            }
        }
        draws.push(draw);
    }
    let next = NetworkState::new(k, deliver(m, d, messages.iter().chain(&retained)))?;
    Ok(PrivateRound {
        next,
        messages,
        retained,
        draws,
    })
}

/// Receiver-side update: `x_i <- sum` of every message addressed to `i`,
/// summed in ascending sender order.
pub fn deliver<'a>(
    agents: usize,
    dim: usize,
    messages: impl IntoIterator<Item = &'a Message>,
) -> Vec<Vec<f64>> {
    let mut inbox: Vec<Vec<&Message>> = vec![Vec::new(); agents];
    for msg in messages {
        inbox[msg.receiver].push(msg);
    }
    inbox
        .into_iter()
        .map(|mut msgs| {
            msgs.sort_by_key(|m| m.sender);
            let mut x = vec![0.0; dim];
            for m in msgs {
                for (a, b) in x.iter_mut().zip(&m.payload) {
                    *a += b;
                }
            }
            x
        })
        .collect()
}

/// One round of the baseline with public stepsize `lambda`.
pub fn conventional_round<P: DistributedProblem>(
    state: &NetworkState,
    coupling: &CouplingMatrix,
    lambda: f64,
    batch: usize,
    problem: &P,
    source: &RandomSource,
) -> Result<ConventionalRound, DsgdError> {
    check_shapes(state, coupling, problem)?;
    let m = state.agents();
    let d = state.dim();
    let k = state.iteration + 1;
    let graph = coupling.graph();
    let gradients: Vec<Vec<f64>> = (0..m)
        .map(|j| local_gradient(problem, j, k, state.iterate(j), batch, 0.0, 1.0, source).0)
        .collect();
    let iterates = (0..m)
        .map(|i| {
            let mut x = vec![0.0; d];
            for &j in graph.neighbors(i) {
                let w = coupling.weight(i, j);
                for (a, b) in x.iter_mut().zip(state.iterate(j)) {
                    *a += w * b;
                }
            }
            for (a, g) in x.iter_mut().zip(&gradients[i]) {
                *a -= lambda * g;
            }
            x
        })
        .collect();
    Ok(ConventionalRound {
        next: NetworkState::new(k, iterates)?,
        stepsize: lambda,
        gradients,
    })
}

/// `||x_bar^{k+1} - x_bar^k + (1/m) sum_i Lambda_i (g_i + xi_i)||`.
pub fn check_mean_dynamics(
    before: &NetworkState,
    after: &NetworkState,
    draws: &[AgentDraw],
) -> f64 {
    let m = before.agents() as f64;
    let mut r: Vec<f64> = after
        .mean()
        .iter()
        .zip(before.mean())
        .map(|(a, b)| a - b)
        .collect();
    for draw in draws {
        for (a, s) in r.iter_mut().zip(draw.step()) {
            *a += s / m;
        }
    }
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests;
