//! Agent graphs and doubly-stochastic coupling matrices.
//!
//! Agents are 1-indexed at the configuration boundary (`edges = [[1, 2], ...]`)
//! and 0-indexed everywhere inside the crate.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

/// Row/column sum tolerance for a coupling matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// `rho` must stay below `1 - RHO_MARGIN`.
pub const RHO_MARGIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("at least {min} agents are required, got {got}")]
    TooFewAgents { min: usize, got: usize },
    #[error("edge endpoint {index} is outside 1..={agents}")]
    InvalidAgentIndex { index: usize, agents: usize },
    #[error("graph is disconnected: agent {unreachable} cannot be reached from agent 1")]
    DisconnectedGraph { unreachable: usize },
    #[error("coupling matrix violates its invariants: {0}")]
    InvalidCoupling(String),
    #[error("spectral radius {0} of W - 11^T/m is not below one")]
    AssumptionViolated(f64),
}

/// Undirected connected graph. Every neighbour set contains the agent itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentGraph {
    neighbors: Vec<Vec<usize>>,
}

impl AgentGraph {
    pub fn agents(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbour set `N_i`, including `i`.
    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    /// Number of neighbours other than the agent itself.
    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len() - 1
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Undirected edges `(i, j)` with `i < j`, 0-indexed.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Total number of directed transmissions per round, `sum_j (|N_j| - 1)`.
    pub fn message_count(&self) -> usize {
        (0..self.agents()).map(|j| self.degree(j)).sum()
    }

    /// One agent with no links. Only useful as the degenerate centralized case.
    pub fn single() -> Self {
        Self {
            neighbors: vec![vec![0]],
        }
    }
}

/// Builds a graph from a 1-indexed edge list. Self-loops and duplicate edges
/// are accepted and ignored.
pub fn build_graph(agents: usize, edges: &[(usize, usize)]) -> Result<AgentGraph, TopologyError> {
    if agents < 2 {
        return Err(TopologyError::TooFewAgents {
            min: 2,
            got: agents,
        });
    }
    let mut sets: Vec<BTreeSet<usize>> = (0..agents).map(|i| BTreeSet::from([i])).collect();
    for &(a, b) in edges {
        for idx in [a, b] {
            if idx == 0 || idx > agents {
                return Err(TopologyError::InvalidAgentIndex { index: idx, agents });
            }
        }
        sets[a - 1].insert(b - 1);
        sets[b - 1].insert(a - 1);
    }
    let graph = AgentGraph {
        neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    };
    if let Some(unreachable) = first_unreachable(&graph) {
        return Err(TopologyError::DisconnectedGraph {
            unreachable: unreachable + 1,
        });
    }
    Ok(graph)
}

fn first_unreachable(graph: &AgentGraph) -> Option<usize> {
    let m = graph.agents();
    let mut seen = vec![false; m];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in graph.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().position(|s| !s)
}

/// Five agents on a ring with the chord (1, 3).
pub fn reference_graph() -> AgentGraph {
    build_graph(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (1, 3)])
        .expect("reference topology is connected")
}

pub fn ring_graph(agents: usize) -> Result<AgentGraph, TopologyError> {
    let edges: Vec<_> = (1..=agents).map(|i| (i, i % agents + 1)).collect();
    build_graph(agents, &edges)
}

pub fn path_graph(agents: usize) -> Result<AgentGraph, TopologyError> {
    let edges: Vec<_> = (1..agents).map(|i| (i, i + 1)).collect();
    build_graph(agents, &edges)
}

pub fn complete_graph(agents: usize) -> Result<AgentGraph, TopologyError> {
    let mut edges = Vec::new();
    for i in 1..=agents {
        for j in (i + 1)..=agents {
            edges.push((i, j));
        }
    }
    build_graph(agents, &edges)
}

/// Doubly-stochastic coupling matrix `W` over an [`AgentGraph`], together with
/// the cached spectral radius of `W - 11^T/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    graph: AgentGraph,
    entries: Vec<f64>,
    rho: f64,
}

impl CouplingMatrix {
    /// Validates a dense row-major matrix against `graph` and caches `rho`.
    pub fn from_dense(graph: AgentGraph, entries: Vec<f64>) -> Result<Self, TopologyError> {
        let m = graph.agents();
        if entries.len() != m * m {
            return Err(TopologyError::InvalidCoupling(format!(
                "expected {} entries, got {}",
                m * m,
                entries.len()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let w = entries[i * m + j];
                let linked = graph.is_neighbor(i, j);
                if !w.is_finite() || w < 0.0 {
                    return Err(TopologyError::InvalidCoupling(format!("w[{i}][{j}] = {w}")));
                }
                if linked != (w > 0.0) {
                    return Err(TopologyError::InvalidCoupling(format!(
                        "w[{i}][{j}] = {w} does not match the graph support"
                    )));
                }
            }
            let row: f64 = (0..m).map(|j| entries[i * m + j]).sum();
            let col: f64 = (0..m).map(|k| entries[k * m + i]).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(TopologyError::InvalidCoupling(format!(
                    "row/column {i} sums to {row}/{col}"
                )));
            }
        }
        let rho = spectral_radius_dense(m, &entries);
        if rho >= 1.0 - RHO_MARGIN {
            return Err(TopologyError::AssumptionViolated(rho));
        }
        Ok(Self {
            graph,
            entries,
            rho,
        })
    }

    pub fn agents(&self) -> usize {
        self.graph.agents()
    }

    pub fn graph(&self) -> &AgentGraph {
        &self.graph
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.agents() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.agents();
        &self.entries[i * m..(i + 1) * m]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Row-major CSV, no header, shortest round-trip decimal representation.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.agents() {
            let line: Vec<String> = self.row(i).iter().map(|w| format!("{w:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Metropolis-Hastings weights: `w_ij = 1/(1 + max(deg_i, deg_j))` on edges,
/// diagonal fills each row to one.
pub fn metropolis_weights(graph: &AgentGraph) -> Result<CouplingMatrix, TopologyError> {
    let m = graph.agents();
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        let mut off = 0.0;
        for &j in graph.neighbors(i) {
            if j != i {
                let w = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
                entries[i * m + j] = w;
                off += w;
            }
        }
        entries[i * m + i] = 1.0 - off;
    }
    CouplingMatrix::from_dense(graph.clone(), entries)
}

/// `rho = ||W - 11^T/m||`, rejecting values that break the contraction assumption.
pub fn spectral_radius(w: &CouplingMatrix) -> Result<f64, TopologyError> {
    let rho = spectral_radius_dense(w.agents(), w.entries());
    if rho >= 1.0 - RHO_MARGIN {
        return Err(TopologyError::AssumptionViolated(rho));
    }
    Ok(rho)
}

/// Power iteration on `A^T A` with `A = W - 11^T/m`; returns `sqrt` of the top
/// eigenvalue. For symmetric `W` this is the spectral radius of `A`.
pub(crate) fn spectral_radius_dense(m: usize, w: &[f64]) -> f64 {
    let inv_m = 1.0 / m as f64;
    let a: Vec<f64> = w.iter().map(|x| x - inv_m).collect();
    let apply = |v: &[f64], transpose: bool, out: &mut [f64]| {
        for i in 0..m {
            out[i] = (0..m)
                .map(|j| {
                    let aij = if transpose {
                        a[j * m + i]
                    } else {
                        a[i * m + j]
                    };
                    aij * v[j]
                })
                .sum();
        }
    };
    // Fixed, irregular start vector; deterministic and not orthogonal to any
    // structured eigenvector in practice.
    let mut v: Vec<f64> = (0..m)
        .map(|i| ((i + 1) as f64 * 0.7548776662).sin() + 0.1)
        .collect();
    let mut tmp = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut lambda = 0.0f64;
    for _ in 0..200_000 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        apply(&v, false, &mut tmp);
        apply(&tmp, true, &mut next);
        let estimate: f64 = v.iter().zip(&next).map(|(a, b)| a * b).sum();
        let converged = (estimate - lambda).abs() <= 1e-17 + 1e-15 * estimate.abs();
        lambda = estimate;
        std::mem::swap(&mut v, &mut next);
        if converged {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_agents_form_the_smallest_graph() {
        let g = build_graph(2, &[(1, 2)]).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1]);
        assert_eq!(g.message_count(), 2);
    }

    #[test]
    fn isolated_agent_is_rejected() {
        assert_eq!(
            build_graph(3, &[(1, 2)]),
            Err(TopologyError::DisconnectedGraph { unreachable: 3 })
        );
    }

    #[test]
    fn bad_indices_are_rejected() {
        assert!(matches!(
            build_graph(3, &[(1, 4)]),
            Err(TopologyError::InvalidAgentIndex { index: 4, .. })
        ));
        assert!(matches!(
            build_graph(3, &[(0, 1)]),
            Err(TopologyError::InvalidAgentIndex { index: 0, .. })
        ));
        assert!(matches!(
            build_graph(1, &[]),
            Err(TopologyError::TooFewAgents { .. })
        ));
    }

    #[test]
    fn reference_graph_is_five_cycle_with_chord() {
        let g = reference_graph();
        assert_eq!(g.agents(), 5);
        assert_eq!(g.edges().len(), 6);
        assert_eq!(g.neighbors(0), &[0, 1, 2, 4]);
        assert_eq!(g.neighbors(3), &[2, 3, 4]);
    }

    #[test]
    fn complete_pair_has_zero_rho() {
        let w = metropolis_weights(&complete_graph(2).unwrap()).unwrap();
        assert_eq!(w.entries(), &[0.5, 0.5, 0.5, 0.5]);
        assert_abs_diff_eq!(w.rho(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spectral_radius(&w).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn path_of_three_matches_hand_weights() {
        let w = metropolis_weights(&path_graph(3).unwrap()).unwrap();
        let third = 1.0 / 3.0;
        let expected = [
            2.0 * third,
            third,
            0.0,
            third,
            third,
            third,
            0.0,
            third,
            2.0 * third,
        ];
        for (a, b) in w.entries().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn ring_of_five_rho_has_closed_form() {
        // Every node has degree 2 so W = (I + A)/3 and the eigenvalues are
        // (1 + 2 cos(2 pi k / 5)) / 3.
        let w = metropolis_weights(&ring_graph(5).unwrap()).unwrap();
        let expected = (1.0 + 2.0 * (2.0 * std::f64::consts::PI / 5.0).cos()) / 3.0;
        assert_abs_diff_eq!(w.rho(), expected, epsilon = 1e-10);
    }

    #[test]
    fn single_agent_coupling_is_identity() {
        let w = CouplingMatrix::from_dense(AgentGraph::single(), vec![1.0]).unwrap();
        assert_eq!(w.rho(), 0.0);
    }

    #[test]
    fn support_mismatch_is_rejected() {
        let g = path_graph(3).unwrap();
        let bad = vec![0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5];
        assert!(matches!(
            CouplingMatrix::from_dense(g, bad),
            Err(TopologyError::InvalidCoupling(_))
        ));
    }

    #[test]
    fn identity_on_connected_graph_violates_contraction() {
        // Identity is doubly stochastic but does not mix. The support check
        // rejects it first, so exercise the radius check directly.
        let rho = spectral_radius_dense(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_export_round_trips() {
        let w = metropolis_weights(&reference_graph()).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(parsed, w.entries());
    }
}
