//! Per-iteration private randomness: mean stepsizes, diagonal stepsize
//! matrices and column-stochastic mixing coefficients.
//!
//! Iterations are 1-based here: `k = 1` is the first update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, RandomSource, StreamRng};

/// Mean stepsize sequence `lambda_bar_i^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsizeSchedule {
    /// `scale * (1 - rho_i^k / (k + offset)) / (k + offset)` with `rho_i^k ~ U[0, 1]`
    /// drawn privately by agent `i` every iteration. `scale = 1, offset = 0`
    /// is the reference schedule.
    PaperDefault { scale: f64, offset: f64 },
    /// Same value for every agent and iteration. Not square-summable; kept as
    /// a negative control for [`verify_schedule`].
    ConstantMean { value: f64 },
    /// Deterministic `scale / (k + offset)^exponent`, identical for all agents.
    Custom {
        scale: f64,
        offset: f64,
        exponent: f64,
    },
}

impl Default for StepsizeSchedule {
    fn default() -> Self {
        Self::reference()
    }
}

impl StepsizeSchedule {
    pub fn reference() -> Self {
        Self::PaperDefault {
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// Deterministic `1/k`.
    pub fn harmonic() -> Self {
        Self::Custom {
            scale: 1.0,
            offset: 0.0,
            exponent: 1.0,
        }
    }

    /// Whether the mean depends on a private per-agent draw.
    pub fn is_random(&self) -> bool {
        matches!(self, Self::PaperDefault { .. })
    }

    /// Mean stepsize for a given private draw `u ~ U[0, 1]` (ignored by the
    /// deterministic kinds).
    pub fn mean_for_draw(&self, k: u64, u: f64) -> f64 {
        debug_assert!(k >= 1);
        match *self {
            Self::PaperDefault { scale, offset } => {
                let t = k as f64 + offset;
                scale * (1.0 - u / t) / t
            }
            Self::ConstantMean { value } => value,
            Self::Custom {
                scale,
                offset,
                exponent,
            } => scale / (k as f64 + offset).powf(exponent),
        }
    }

    /// Expectation of the mean stepsize over the private draw. This is the
    /// publicly known part of the schedule.
    pub fn public_mean(&self, k: u64) -> f64 {
        self.mean_for_draw(k, 0.5)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Self::PaperDefault { scale, offset } => {
                scale.is_finite() && scale >= 0.0 && offset.is_finite() && offset >= 0.0
            }
            Self::ConstantMean { value } => value.is_finite() && value >= 0.0,
            Self::Custom {
                scale,
                offset,
                exponent,
            } => {
                scale.is_finite()
                    && scale >= 0.0
                    && offset.is_finite()
                    && offset >= 0.0
                    && exponent.is_finite()
                    && exponent >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid stepsize schedule {self:?}"))
        }
    }
}

/// How the diagonal of `Lambda_j^k` relates to the mean stepsize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeMode {
    /// Entries i.i.d. `U[0, 2 * lambda_bar]`.
    #[default]
    DrawAroundMean,
    /// Every entry is its own draw of the schedule value, e.g. a fresh
    /// `(1 - rho/k)/k` per coordinate.
    UseDirectly,
}

/// `lambda_bar_j^k` for agent `j`. Deterministic given the source.
pub fn mean_stepsize(
    schedule: &StepsizeSchedule,
    agent: usize,
    k: u64,
    source: &RandomSource,
) -> f64 {
    let u = if schedule.is_random() {
        source.rng(agent, k, Purpose::MeanStepsize).random::<f64>()
    } else {
        0.0
    };
    schedule.mean_for_draw(k, u)
}

/// Diagonal stepsize matrix `Lambda_j^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepsizeMatrix {
    pub agent: usize,
    pub iteration: u64,
    pub mean: f64,
    pub diag: Vec<f64>,
}

impl StepsizeMatrix {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `Lambda * g`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.diag.iter().zip(g).map(|(l, x)| l * x).collect()
    }

    /// `lambda * I`, used for deterministic baselines.
    pub fn scalar(agent: usize, iteration: u64, lambda: f64, dim: usize) -> Self {
        Self {
            agent,
            iteration,
            mean: lambda,
            diag: vec![lambda; dim],
        }
    }
}

/// `dim` i.i.d. draws on `[0, 2 * mean]`.
pub fn sample_stepsize_matrix(mean: f64, dim: usize, rng: &mut StreamRng) -> Vec<f64> {
    debug_assert!(mean >= 0.0);
    (0..dim).map(|_| 2.0 * mean * rng.random::<f64>()).collect()
}

/// Draws agent `j`'s full stepsize matrix for iteration `k` under `mode`.
pub fn draw_stepsize_matrix(
    schedule: &StepsizeSchedule,
    mode: StepsizeMode,
    agent: usize,
    k: u64,
    dim: usize,
    source: &RandomSource,
) -> StepsizeMatrix {
    let mut rng = source.rng(agent, k, Purpose::Stepsize);
    match mode {
        StepsizeMode::DrawAroundMean => {
            let mean = mean_stepsize(schedule, agent, k, source);
            StepsizeMatrix {
                agent,
                iteration: k,
                mean,
                diag: sample_stepsize_matrix(mean, dim, &mut rng),
            }
        }
        StepsizeMode::UseDirectly => {
            let diag = (0..dim)
                .map(|_| {
                    let u = if schedule.is_random() {
                        rng.random::<f64>()
                    } else {
                        0.0
                    };
                    schedule.mean_for_draw(k, u)
                })
                .collect();
            StepsizeMatrix {
                agent,
                iteration: k,
                mean: schedule.public_mean(k),
                diag,
            }
        }
    }
}

/// Column `b_{.j}^k` of the mixing matrix: nonnegative weights on `N_j`
/// summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingColumn {
    pub owner: usize,
    /// `(receiver, b_{receiver, owner})`, sorted by receiver.
    pub weights: Vec<(usize, f64)>,
}

impl MixingColumn {
    pub fn weight(&self, receiver: usize) -> f64 {
        self.weights
            .iter()
            .find(|(i, _)| *i == receiver)
            .map_or(0.0, |(_, b)| *b)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|(_, b)| b).sum()
    }

    /// `b_ij = 1/|N_j|`.
    pub fn uniform(owner: usize, neighbors: &[usize]) -> Self {
        let b = 1.0 / neighbors.len() as f64;
        Self {
            owner,
            weights: neighbors.iter().map(|&i| (i, b)).collect(),
        }
    }

    /// Explicit weights, renormalised over `neighbors`.
    pub fn proportional(owner: usize, neighbors: &[usize], raw: &[f64]) -> Self {
        let total: f64 = raw.iter().sum();
        Self {
            owner,
            weights: neighbors
                .iter()
                .zip(raw)
                .map(|(&i, &r)| (i, r / total))
                .collect(),
        }
    }
}

/// `|N_j|` i.i.d. `U(0, 1]` draws, normalised to sum to one.
pub fn sample_mixing_column(
    owner: usize,
    neighbors: &[usize],
    rng: &mut StreamRng,
) -> MixingColumn {
    debug_assert!(neighbors.contains(&owner));
    if neighbors.len() == 1 {
        return MixingColumn {
            owner,
            weights: vec![(owner, 1.0)],
        };
    }
    let raw: Vec<f64> = neighbors
        .iter()
        .map(|_| 1.0 - rng.random::<f64>())
        .collect();
    MixingColumn::proportional(owner, neighbors, &raw)
}

/// Expected self-weight `E[b_jj]` under [`sample_mixing_column`]; `1/|N_j|` by
/// exchangeability.
pub fn expected_self_weight(neighbors: usize) -> f64 {
    1.0 / neighbors as f64
}

/// Partial sums at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialSums {
    pub k: u64,
    pub mean_sum: f64,
    pub mean_square_sum: f64,
    pub variance_sum: f64,
    pub heterogeneity_sum: f64,
}

/// Finite-horizon diagnostic of the summability conditions. A flag being
/// `false` means the partial sums look compatible with the condition; it is
/// never a proof.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub horizon: u64,
    pub agents: usize,
    /// Checkpoints at roughly logarithmic spacing, last entry at the horizon.
    pub checkpoints: Vec<PartialSums>,
    /// `sum lambda_bar` looks convergent (or is identically zero).
    pub mean_sum_converges: bool,
    /// `sum lambda_bar^2` keeps growing.
    pub square_sum_diverges: bool,
    /// `sum sigma^2` keeps growing.
    pub variance_sum_diverges: bool,
    /// `sum_k sum_{i != j} |lambda_bar_i - lambda_bar_j|` keeps growing.
    pub heterogeneity_diverges: bool,
}

impl ScheduleReport {
    pub fn final_sums(&self) -> PartialSums {
        *self.checkpoints.last().expect("at least one checkpoint")
    }

    pub fn is_admissible(&self) -> bool {
        !(self.mean_sum_converges
            || self.square_sum_diverges
            || self.variance_sum_diverges
            || self.heterogeneity_diverges)
    }
}

/// Ratio of the last-half increment to the previous-quarter increment below
/// which a partial-sum sequence is treated as converging.
const CONVERGENCE_RATIO: f64 = 0.95;

/// Accumulates the partial sums over `k = 1..=horizon` for `agents` agents
/// and flags trends incompatible with the summability conditions.
pub fn verify_schedule(
    schedule: &StepsizeSchedule,
    mode: StepsizeMode,
    agents: usize,
    horizon: u64,
    source: &RandomSource,
) -> ScheduleReport {
    assert!(horizon >= 10, "horizon must be at least 10");
    let mut checkpoints = Vec::new();
    let (mut s1, mut s2, mut sv, mut sh) = (0.0, 0.0, 0.0, 0.0);
    let quarter = horizon / 4;
    let half = horizon / 2;
    let mut at_quarter = None;
    let mut at_half = None;
    let mut next_checkpoint = 1u64;
    let mut means = vec![0.0; agents];
    for k in 1..=horizon {
        for (i, slot) in means.iter_mut().enumerate() {
            *slot = mean_stepsize(schedule, i, k, source);
        }
        for &mean in &means {
            s1 += mean;
            s2 += mean * mean;
            sv += entry_variance(schedule, mode, k, mean);
        }
        for i in 0..agents {
            for j in 0..agents {
                if i != j {
                    sh += (means[i] - means[j]).abs();
                }
            }
        }
        let sums = PartialSums {
            k,
            mean_sum: s1,
            mean_square_sum: s2,
            variance_sum: sv,
            heterogeneity_sum: sh,
        };
        if k == quarter {
            at_quarter = Some(sums);
        }
        if k == half {
            at_half = Some(sums);
        }
        if k == next_checkpoint || k == horizon {
            checkpoints.push(sums);
            next_checkpoint = (next_checkpoint * 2).max(k + 1);
        }
    }
    let q = at_quarter.expect("horizon >= 10");
    let h = at_half.expect("horizon >= 10");
    let last = *checkpoints.last().unwrap();
    let grows = |f: fn(&PartialSums) -> f64| {
        let recent = f(&last) - f(&h);
        let earlier = f(&h) - f(&q);
        if earlier <= 0.0 {
            recent > 0.0
        } else {
            recent / earlier >= CONVERGENCE_RATIO
        }
    };
    ScheduleReport {
        horizon,
        agents,
        checkpoints,
        mean_sum_converges: !grows(|s| s.mean_sum),
        square_sum_diverges: grows(|s| s.mean_square_sum),
        variance_sum_diverges: grows(|s| s.variance_sum),
        heterogeneity_diverges: grows(|s| s.heterogeneity_sum),
    }
}

/// Variance of one diagonal entry of `Lambda_j^k`.
fn entry_variance(schedule: &StepsizeSchedule, mode: StepsizeMode, k: u64, mean: f64) -> f64 {
    match mode {
        // U[0, 2m] has variance m^2 / 3.
        StepsizeMode::DrawAroundMean => mean * mean / 3.0,
        StepsizeMode::UseDirectly => {
            let lo = schedule.mean_for_draw(k, 1.0);
            let hi = schedule.mean_for_draw(k, 0.0);
            (hi - lo).powi(2) / 12.0
        }
    }
}
