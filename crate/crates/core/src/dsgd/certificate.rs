//! Empirical check of the two-coordinate recursion behind convergence:
//! `v^k = [||x_bar^k - theta*||^2, sum_i ||x_i^k - x_bar^k||^2]`.
//!
//! The consensus coordinate should behave like `v2^{k+1} <= rho v2^k + c^k`
//! with a summable perturbation `c^k`. This is a diagnostic over averaged
//! runs, not a proof.

use super::Trajectory;

/// Consensus error must fall this far below its starting value to end the
/// leading contraction phase.
const CONTRACTION_DROP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    /// Run-averaged `v^k`.
    pub v: Vec<[f64; 2]>,
    /// `v2^{k+1} / v2^k`.
    pub consensus_ratio: Vec<f64>,
    /// `c^k = max(0, v2^{k+1} - rho v2^k)`.
    pub perturbation: Vec<f64>,
    /// Partial sums of `c^k`.
    pub perturbation_partial_sums: Vec<f64>,
    /// Share of the total perturbation mass in the second half of the run;
    /// small when the partial sums have levelled off.
    pub tail_share: f64,
    /// Rounds from the start until consensus error first drops by
    /// `1e-2`; `None` if it never does.
    pub contraction_rounds: Option<usize>,
    /// Geometric-mean one-step ratio over the contraction phase.
    pub contraction_ratio: Option<f64>,
    /// Both coordinates end at most `1e-3` of where they started.
    pub vanishing: bool,
}

impl CertificateReport {
    /// Structural consistency with contraction factor `rho` (+ `slack`).
    pub fn contracts_within(&self, rho: f64, slack: f64) -> bool {
        self.contraction_ratio.is_some_and(|r| r <= rho + slack)
    }
}

/// `None` when the runs carry no optimality gap (unknown `theta*`).
pub fn recursion_certificate(runs: &[&Trajectory], rho: f64) -> Option<CertificateReport> {
    let first = runs.first()?;
    first.column("mean_opt_gap")?;
    let len = first.len();
    let r = runs.len() as f64;
    let mut v = vec![[0.0; 2]; len];
    for t in runs {
        let gap = t.column("mean_opt_gap")?;
        let cons = t.consensus_err();
        for k in 0..len {
            v[k][0] += gap[k] / r;
            v[k][1] += cons[k] / r;
        }
    }
    let steps = len.saturating_sub(1);
    let mut consensus_ratio = Vec::with_capacity(steps);
    let mut perturbation = Vec::with_capacity(steps);
    let mut partial = Vec::with_capacity(steps);
    let mut total = 0.0;
    for k in 0..steps {
        consensus_ratio.push(v[k + 1][1] / v[k][1]);
        let c = (v[k + 1][1] - rho * v[k][1]).max(0.0);
        perturbation.push(c);
        total += c;
        partial.push(total);
    }
    let tail: f64 = perturbation[steps / 2..].iter().sum();
    let tail_share = if total > 0.0 { tail / total } else { 0.0 };
    let start = v.first().map_or(0.0, |x| x[1]);
    let contraction_rounds = v
        .iter()
        .position(|x| x[1] <= CONTRACTION_DROP * start)
        .filter(|&n| n > 0);
    let contraction_ratio = contraction_rounds.map(|n| (v[n][1] / start).powf(1.0 / n as f64));
    let vanishing = match (v.first(), v.last()) {
        (Some(a), Some(b)) => b[0] <= 1e-3 * a[0] && b[1] <= 1e-3 * a[1],
        _ => false,
    };
    Some(CertificateReport {
        v,
        consensus_ratio,
        perturbation,
        perturbation_partial_sums: partial,
        tail_share,
        contraction_rounds,
        contraction_ratio,
        vanishing,
    })
}
