//! Gradient inference from what an observer can see.
//!
//! Attacks only accept public knowledge (coupling matrix, protocol
//! parameters, schedule means) and logged messages or shared iterates. The
//! private draws of a round live in [`crate::dsgd::AgentDraw`], which no
//! attack accepts:
//!
//! ```compile_fail
//! use ppdsgd::adversary::{attack_private, MessageLog};
//! use ppdsgd::dsgd::{AgentDraw, PrivateParams};
//! use ppdsgd::topology::CouplingMatrix;
//! fn leak(draws: &[AgentDraw], w: &CouplingMatrix, p: &PrivateParams) {
//!     let _ = attack_private(draws, w, p, None);
//! }
//! ```
//!
//! Ground truth enters only through [`evaluate`], after the attack has
//! produced its estimates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dsgd::{Message, MixingRule, NetworkState, PrivateParams};
use crate::problems::SensorProblem;
use crate::topology::CouplingMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error(
        "iteration {iteration}: expected {expected} messages from agent {agent}, found {found}"
    )]
    MissingMessages {
        iteration: u64,
        agent: usize,
        expected: usize,
        found: usize,
    },
    #[error("iteration {0}: public stepsize is zero, gradient cannot be isolated")]
    ZeroStepsize(u64),
    #[error("malformed message log: {0}")]
    Malformed(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Who is watching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationModel {
    /// Every transmitted message, nothing internal.
    Eavesdropper,
    /// Messages addressed to this agent, plus its own state.
    CuriousAgent(usize),
}

/// Transmitted messages indexed by iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MessageLog {
    by_iteration: BTreeMap<u64, Vec<Message>>,
    dim: usize,
}

impl MessageLog {
    pub fn new(messages: impl IntoIterator<Item = Message>) -> Result<Self, AttackError> {
        let mut by_iteration: BTreeMap<u64, Vec<Message>> = BTreeMap::new();
        let mut dim = None;
        for m in messages {
            if m.sender == m.receiver {
                return Err(AttackError::Malformed(format!(
                    "self message of agent {} is never transmitted",
                    m.sender
                )));
            }
            match dim {
                None => dim = Some(m.payload.len()),
                Some(d) if d != m.payload.len() => {
                    return Err(AttackError::DimensionMismatch {
                        expected: d,
                        got: m.payload.len(),
                    })
                }
                _ => {}
            }
            by_iteration.entry(m.iteration).or_default().push(m);
        }
        Ok(Self {
            by_iteration,
            dim: dim.unwrap_or(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iterations(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_iteration.keys().copied()
    }

    pub fn at(&self, k: u64) -> &[Message] {
        self.by_iteration.get(&k).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_iteration.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restricts the log to what `model` can see.
    pub fn visible_to(&self, model: ObservationModel) -> Self {
        match model {
            ObservationModel::Eavesdropper => self.clone(),
            ObservationModel::CuriousAgent(i) => Self {
                by_iteration: self
                    .by_iteration
                    .iter()
                    .map(|(k, ms)| (*k, ms.iter().filter(|m| m.receiver == i).cloned().collect()))
                    .collect(),
                dim: self.dim,
            },
        }
    }

    /// Rows `k,sender,receiver,v0..v{d-1}`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string(), "sender".into(), "receiver".into()];
        header.extend((0..self.dim).map(|c| format!("v{c}")));
        w.write_record(&header)?;
        for ms in self.by_iteration.values() {
            for m in ms {
                let mut rec = vec![
                    m.iteration.to_string(),
                    m.sender.to_string(),
                    m.receiver.to_string(),
                ];
                rec.extend(m.payload.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, AttackError> {
        let bad = |e: String| AttackError::Malformed(e);
        let mut r = csv::Reader::from_reader(input);
        let mut messages = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() < 3 {
                return Err(bad(format!("short row {rec:?}")));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s}: {e}")));
            let payload = rec
                .iter()
                .skip(3)
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            messages.push(Message {
                iteration: int(&rec[0])?,
                sender: int(&rec[1])? as usize,
                receiver: int(&rec[2])? as usize,
                payload,
            });
        }
        Self::new(messages)
    }
}

/// `sum_{i != j} v_ij^k`, which equals
/// `(1 - w_jj) x_j - (1 - b_jj) Lambda_j g_j`.
pub fn residual_observable(
    log: &MessageLog,
    coupling: &CouplingMatrix,
    j: usize,
    k: u64,
) -> Result<Vec<f64>, AttackError> {
    let expected = coupling.graph().neighbors(j).len() - 1;
    let mut sum = vec![0.0; log.dim()];
    let mut found = 0;
    for m in log.at(k).iter().filter(|m| m.sender == j) {
        found += 1;
        for (a, v) in sum.iter_mut().zip(&m.payload) {
            *a += v;
        }
    }
    if found != expected {
        return Err(AttackError::MissingMessages {
            iteration: k,
            agent: j,
            expected,
            found,
        });
    }
    Ok(sum)
}

/// An inferred gradient `g_j^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub iteration: u64,
    pub agent: usize,
    pub gradient: Vec<f64>,
    /// The iterate the attacker believes produced the gradient.
    pub iterate: Vec<f64>,
}

/// Exact inversion against the baseline, whose agents share their full
/// iterates: `g_i^k = (sum_j w_ij x_j^k - x_i^{k+1}) / lambda^k`.
/// `states[r]` is the shared state after `r` rounds; `stepsizes[r]` the
/// public stepsize of the round leading to `states[r + 1]`.
pub fn attack_conventional(
    states: &[NetworkState],
    coupling: &CouplingMatrix,
    stepsizes: &[f64],
) -> Result<Vec<GradientEstimate>, AttackError> {
    let mut out = Vec::new();
    for (r, pair) in states.windows(2).enumerate() {
        let (now, next) = (&pair[0], &pair[1]);
        let k = now.iteration() + 1;
        let lambda = *stepsizes
            .get(r)
            .ok_or_else(|| AttackError::Malformed(format!("no stepsize for round {k}")))?;
        if lambda == 0.0 {
            return Err(AttackError::ZeroStepsize(k));
        }
        for i in 0..now.agents() {
            let mut mixed = vec![0.0; now.dim()];
            for &j in coupling.graph().neighbors(i) {
                let w = coupling.weight(i, j);
                for (a, x) in mixed.iter_mut().zip(now.iterate(j)) {
                    *a += w * x;
                }
            }
            let gradient = mixed
                .iter()
                .zip(next.iterate(i))
                .map(|(m, x)| (m - x) / lambda)
                .collect();
            out.push(GradientEstimate {
                iteration: k,
                agent: i,
                gradient,
                iterate: now.iterate(i).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Public expectation of `b_jj` under the protocol's mixing rule.
fn public_self_mixing(params: &PrivateParams, coupling: &CouplingMatrix, j: usize) -> f64 {
    match params.mixing {
        MixingRule::Random | MixingRule::Uniform => {
            1.0 / coupling.graph().neighbors(j).len() as f64
        }
        MixingRule::Coupling => coupling.weight(j, j),
    }
}

/// Mean-inversion attack of an eavesdropper: replaces `Lambda_j^k` by its
/// public mean and `b_jj^k` by its expectation, then solves the residual
/// relation for `g_j^k`.
///
/// `side_information[r]` grants the true state after `r` rounds. Without it
/// `x_j` is guessed as the average of `v_ij / w_ij` over observed
/// receivers, which is exact only when the gradient term vanishes.
pub fn attack_private(
    log: &MessageLog,
    coupling: &CouplingMatrix,
    params: &PrivateParams,
    side_information: Option<&[NetworkState]>,
) -> Result<Vec<GradientEstimate>, AttackError> {
    let mut out = Vec::new();
    for k in log.iterations() {
        let side = match side_information {
            Some(states) => Some(states.get((k - 1) as usize).ok_or_else(|| {
                AttackError::Malformed(format!("no side information for iteration {k}"))
            })?),
            None => None,
        };
        out.extend(attack_private_at(log, k, coupling, params, side)?);
    }
    Ok(out)
}

/// [`attack_private`] restricted to iteration `k`; `side_information` is the
/// state the round started from.
pub fn attack_private_at(
    log: &MessageLog,
    k: u64,
    coupling: &CouplingMatrix,
    params: &PrivateParams,
    side_information: Option<&NetworkState>,
) -> Result<Vec<GradientEstimate>, AttackError> {
    let lambda = params.stepsize.schedule().public_mean(k);
    if lambda == 0.0 {
        return Err(AttackError::ZeroStepsize(k));
    }
    let mut out = Vec::new();
    for j in 0..coupling.agents() {
        let degree = coupling.graph().neighbors(j).len() - 1;
        if degree == 0 {
            continue;
        }
        let residual = residual_observable(log, coupling, j, k)?;
        let x_hat = match side_information {
            Some(s) => s.iterate(j).to_vec(),
            None => consensus_proxy(log.at(k), coupling, j, log.dim()),
        };
        let w_jj = coupling.weight(j, j);
        let b_jj = public_self_mixing(params, coupling, j);
        let scale = (1.0 - b_jj) * lambda;
        let gradient = x_hat
            .iter()
            .zip(&residual)
            .map(|(x, r)| ((1.0 - w_jj) * x - r) / scale)
            .collect();
        out.push(GradientEstimate {
            iteration: k,
            agent: j,
            gradient,
            iterate: x_hat,
        });
    }
    Ok(out)
}

/// Average of `v_ij / w_ij` over the messages agent `j` sent in one round.
fn consensus_proxy(round: &[Message], coupling: &CouplingMatrix, j: usize, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0.0;
    for msg in round.iter().filter(|m| m.sender == j) {
        let w = coupling.weight(msg.receiver, j);
        for (a, v) in acc.iter_mut().zip(&msg.payload) {
            *a += v / w;
        }
        count += 1.0;
    }
    acc.iter_mut().for_each(|v| *v /= count);
    acc
}

/// Honest-but-curious agent `i`: from its own incoming `v_ij` alone it
/// estimates each neighbour's gradient as `(w_ij x_j - v_ij) / (E[b_ij] lambda_bar)`,
/// with `x_j` granted through `side_information` or guessed as `v_ij / w_ij`.
pub fn attack_curious(
    log: &MessageLog,
    observer: usize,
    coupling: &CouplingMatrix,
    params: &PrivateParams,
    side_information: Option<&[NetworkState]>,
) -> Result<Vec<GradientEstimate>, AttackError> {
    let visible = log.visible_to(ObservationModel::CuriousAgent(observer));
    let mut out = Vec::new();
    for k in visible.iterations() {
        let lambda = params.stepsize.schedule().public_mean(k);
        if lambda == 0.0 {
            return Err(AttackError::ZeroStepsize(k));
        }
        for msg in visible.at(k) {
            let j = msg.sender;
            let w = coupling.weight(observer, j);
            let b = match params.mixing {
                MixingRule::Random | MixingRule::Uniform => {
                    1.0 / coupling.graph().neighbors(j).len() as f64
                }
                MixingRule::Coupling => w,
            };
            let x_hat: Vec<f64> = match side_information {
                Some(states) => states
                    .get((k - 1) as usize)
                    .ok_or_else(|| {
                        AttackError::Malformed(format!("no side information for iteration {k}"))
                    })?
                    .iterate(j)
                    .to_vec(),
                None => msg.payload.iter().map(|v| v / w).collect(),
            };
            let gradient = x_hat
                .iter()
                .zip(&msg.payload)
                .map(|(x, v)| (w * x - v) / (b * lambda))
                .collect();
            out.push(GradientEstimate {
                iteration: k,
                agent: j,
                gradient,
                iterate: x_hat,
            });
        }
    }
    Ok(out)
}

/// Error of one estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackRow {
    pub iteration: u64,
    pub agent: usize,
    /// `||g_hat - g||^2 / d`.
    pub mse_gradient: f64,
    /// Per-coordinate squared error of the running parameter estimate, when
    /// the attacked agent's data model is known.
    pub mse_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    /// Mean of `mse_gradient` per iteration, in iteration order.
    pub fn mse_series(&self) -> Vec<(u64, f64)> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.iteration).or_default();
            e.0 += r.mse_gradient;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// Mean of `mse_gradient` over all rows.
    pub fn overall_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.mse_gradient).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Largest `mse_gradient` of any row.
    pub fn max_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.mse_gradient).fold(0.0, f64::max)
    }

    /// Rows `k,agent,mse_gradient,mse_theta`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "agent", "mse_gradient", "mse_theta"])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.agent.to_string(),
                format!("{:?}", r.mse_gradient),
                r.mse_theta.map_or(String::new(), |v| format!("{v:?}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ground-truth gradients keyed by `(iteration, agent)`.
pub type GradientTruth = BTreeMap<(u64, usize), Vec<f64>>;

/// Running least-squares inversion of gradients for sensor agents:
/// `g = 2 (H x - c)` gives `c_hat = H x_hat - g_hat / 2`, and the running
/// mean of `c_hat` solves `H theta = c` for the agent's own estimate.
struct ParameterTracker<'a> {
    problems: &'a [SensorProblem],
    sums: BTreeMap<usize, (Vec<f64>, f64)>,
    secrets: Vec<Vec<f64>>,
}

impl<'a> ParameterTracker<'a> {
    fn new(problems: &'a [SensorProblem]) -> Self {
        let secrets = problems
            .iter()
            .map(|p| {
                p.local_optimum()
                    .expect("local normal matrix is regularized or full rank")
            })
            .collect();
        Self {
            problems,
            sums: BTreeMap::new(),
            secrets,
        }
    }

    fn update(&mut self, est: &GradientEstimate) -> f64 {
        let p = &self.problems[est.agent];
        let d = est.gradient.len();
        let h = DMatrix::from_row_slice(d, d, p.hessian_half());
        let x = DVector::from_column_slice(&est.iterate);
        let g = DVector::from_column_slice(&est.gradient);
        let c = &h * x - g * 0.5;
        let entry = self
            .sums
            .entry(est.agent)
            .or_insert_with(|| (vec![0.0; d], 0.0));
        for (a, v) in entry.0.iter_mut().zip(c.iter()) {
            *a += v;
        }
        entry.1 += 1.0;
        let mean = DVector::from_iterator(d, entry.0.iter().map(|v| v / entry.1));
        let theta = h
            .lu()
            .solve(&mean)
            .expect("nonsingular local normal matrix");
        theta
            .iter()
            .zip(&self.secrets[est.agent])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d as f64
    }
}

/// Scores estimates against ground truth. With `sensor` data the report also
/// tracks how well the attacker pins down each agent's own least-squares
/// estimate.
pub fn evaluate(
    estimates: &[GradientEstimate],
    truth: &GradientTruth,
    sensor: Option<&[SensorProblem]>,
) -> Result<AttackReport, AttackError> {
    let mut tracker = sensor.map(ParameterTracker::new);
    let mut rows = Vec::with_capacity(estimates.len());
    for est in estimates {
        let g = truth.get(&(est.iteration, est.agent)).ok_or_else(|| {
            AttackError::Malformed(format!(
                "no ground truth for agent {} at iteration {}",
                est.agent, est.iteration
            ))
        })?;
        if g.len() != est.gradient.len() {
            return Err(AttackError::DimensionMismatch {
                expected: g.len(),
                got: est.gradient.len(),
            });
        }
        let mse_gradient = g
            .iter()
            .zip(&est.gradient)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / g.len() as f64;
        let mse_theta = tracker.as_mut().map(|t| t.update(est));
        rows.push(AttackRow {
            iteration: est.iteration,
            agent: est.agent,
            mse_gradient,
            mse_theta,
        });
    }
    Ok(AttackReport { rows })
}

/// Rows `k,agent,g0..` of true gradients.
pub fn write_truth_csv<W: std::io::Write>(truth: &GradientTruth, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = truth.values().next().map_or(0, Vec::len);
    let mut header = vec!["k".to_string(), "agent".into()];
    header.extend((0..d).map(|c| format!("g{c}")));
    w.write_record(&header)?;
    for ((k, agent), g) in truth {
        let mut rec = vec![k.to_string(), agent.to_string()];
        rec.extend(g.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: std::io::Read>(input: R) -> Result<GradientTruth, AttackError> {
    let bad = |e: String| AttackError::Malformed(e);
    let mut r = csv::Reader::from_reader(input);
    let mut truth = GradientTruth::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let k: u64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad iteration {}", &rec[0])))?;
        let agent: usize = rec[1]
            .parse()
            .map_err(|_| bad(format!("bad agent {}", &rec[1])))?;
        let g = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        truth.insert((k, agent), g);
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsgd::{initial_state, private_round, PrivateRound, StepsizeRule};
    use crate::problems::{generate_sensor_data, DistributedProblem, SensorNetwork, SensorSpec};
    use crate::randomization::StepsizeSchedule;
    use crate::rng::RandomSource;
    use crate::topology::{metropolis_weights, path_graph, reference_graph};

    fn setup() -> (SensorNetwork, CouplingMatrix) {
        let net = generate_sensor_data(&SensorSpec::default(), &RandomSource::new(3)).unwrap();
        (net, metropolis_weights(&reference_graph()).unwrap())
    }

    fn rounds(
        net: &SensorNetwork,
        w: &CouplingMatrix,
        params: &PrivateParams,
        n: usize,
    ) -> (Vec<NetworkState>, Vec<PrivateRound>) {
        let src = RandomSource::new(9);
        let mut states = vec![initial_state(5, 2, &src)];
        let mut out = Vec::new();
        for _ in 0..n {
            let r = private_round(states.last().unwrap(), w, params, net, &src, 1.0).unwrap();
            states.push(r.next.clone());
            out.push(r);
        }
        (states, out)
    }

    fn truth_of(rounds: &[PrivateRound]) -> GradientTruth {
        rounds
            .iter()
            .flat_map(|r| {
                r.draws
                    .iter()
                    .map(move |d| ((r.next.iteration(), d.agent), d.gradient.clone()))
            })
            .collect()
    }

    #[test]
    fn residual_matches_private_draws() {
        let (net, w) = setup();
        let params = PrivateParams::standard(StepsizeSchedule::reference());
        let (states, rs) = rounds(&net, &w, &params, 30);
        let log = MessageLog::new(rs.iter().flat_map(|r| r.messages.clone())).unwrap();
        for (r, round) in rs.iter().enumerate() {
            let k = round.next.iteration();
            for d in &round.draws {
                let j = d.agent;
                let res = residual_observable(&log, &w, j, k).unwrap();
                let b = d.mixing.weight(j);
                let step = d.step();
                for c in 0..2 {
                    let expected =
                        (1.0 - w.weight(j, j)) * states[r].iterate(j)[c] - (1.0 - b) * step[c];
                    assert!((res[c] - expected).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_stepsize_residual_is_weighted_iterate() {
        let (net, w) = setup();
        let params = PrivateParams {
            stepsize: StepsizeRule::Deterministic {
                schedule: StepsizeSchedule::ConstantMean { value: 0.0 },
            },
            ..PrivateParams::standard(StepsizeSchedule::reference())
        };
        let (states, rs) = rounds(&net, &w, &params, 1);
        let log = MessageLog::new(rs[0].messages.clone()).unwrap();
        for j in 0..5 {
            let res = residual_observable(&log, &w, j, 1).unwrap();
            for c in 0..2 {
                assert!((res[c] - (1.0 - w.weight(j, j)) * states[0].iterate(j)[c]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn missing_messages_reported() {
        let (net, w) = setup();
        let params = PrivateParams::standard(StepsizeSchedule::reference());
        let (_, rs) = rounds(&net, &w, &params, 1);
        let mut msgs = rs[0].messages.clone();
        msgs.remove(0);
        let log = MessageLog::new(msgs).unwrap();
        assert!(matches!(
            residual_observable(&log, &w, 0, 1),
            Err(AttackError::MissingMessages { .. })
        ));
    }

    #[test]
    fn curious_agent_sees_only_its_inbox() {
        let (net, w) = setup();
        let params = PrivateParams::standard(StepsizeSchedule::reference());
        let (_, rs) = rounds(&net, &w, &params, 3);
        let log = MessageLog::new(rs.iter().flat_map(|r| r.messages.clone())).unwrap();
        let inbox = log.visible_to(ObservationModel::CuriousAgent(2));
        assert_eq!(inbox.len(), 3 * (w.graph().neighbors(2).len() - 1));
        assert!(inbox
            .iterations()
            .all(|k| inbox.at(k).iter().all(|m| m.receiver == 2)));
    }

    #[test]
    fn deterministic_protocol_with_side_information_leaks() {
        let (net, w) = setup();
        // b_ij = 1/|N_j| and Lambda = lambda I: the mean inversion is exact.
        let params = PrivateParams::noise_injection(StepsizeSchedule::harmonic(), 0.0);
        let (states, rs) = rounds(&net, &w, &params, 50);
        let log = MessageLog::new(rs.iter().flat_map(|r| r.messages.clone())).unwrap();
        let est = attack_private(&log, &w, &params, Some(&states)).unwrap();
        let report = evaluate(&est, &truth_of(&rs), None).unwrap();
        assert!(report.max_mse() <= 1e-16);
        let curious = attack_curious(&log, 0, &w, &params, Some(&states)).unwrap();
        assert!(evaluate(&curious, &truth_of(&rs), None).unwrap().max_mse() <= 1e-16);
    }

    #[test]
    fn random_protocol_keeps_error_positive() {
        let (net, w) = setup();
        let params = PrivateParams::standard(StepsizeSchedule::reference());
        let (states, rs) = rounds(&net, &w, &params, 200);
        let log = MessageLog::new(rs.iter().flat_map(|r| r.messages.clone())).unwrap();
        let est = attack_private(&log, &w, &params, Some(&states)).unwrap();
        let report = evaluate(&est, &truth_of(&rs), Some(net.locals())).unwrap();
        assert!(report.overall_mse() > 1e-2);
        assert_eq!(report.mse_series().len(), 200);
    }

    #[test]
    fn conventional_zero_stepsize_is_an_error() {
        let (_, w) = setup();
        let s = initial_state(5, 2, &RandomSource::new(0));
        assert_eq!(
            attack_conventional(&[s.clone(), s], &w, &[0.0]),
            Err(AttackError::ZeroStepsize(1))
        );
    }

    #[test]
    fn isolated_sender_has_empty_residual() {
        let g = path_graph(2).unwrap();
        let w = metropolis_weights(&g).unwrap();
        let log = MessageLog::new(vec![]).unwrap();
        assert!(matches!(
            residual_observable(&log, &w, 0, 1),
            Err(AttackError::MissingMessages { found: 0, .. })
        ));
    }

    #[test]
    fn csv_round_trips() {
        let (net, w) = setup();
        let params = PrivateParams::standard(StepsizeSchedule::reference());
        let (_, rs) = rounds(&net, &w, &params, 4);
        let log = MessageLog::new(rs.iter().flat_map(|r| r.messages.clone())).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(MessageLog::read_csv(buf.as_slice()).unwrap(), log);
        let truth = truth_of(&rs);
        let mut buf = Vec::new();
        write_truth_csv(&truth, &mut buf).unwrap();
        assert_eq!(read_truth_csv(buf.as_slice()).unwrap(), truth);
    }

    #[test]
    fn self_messages_are_rejected() {
        let m = Message {
            iteration: 1,
            sender: 0,
            receiver: 0,
            payload: vec![0.0],
        };
        assert!(MessageLog::new(vec![m]).is_err());
    }
}
