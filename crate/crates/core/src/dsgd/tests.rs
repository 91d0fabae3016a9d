use super::*;
use crate::problems::{generate_sensor_data, SensorNetwork, SensorProblem, SensorSpec};
use crate::randomization::StepsizeSchedule;
use crate::topology::{
    build_graph, complete_graph, metropolis_weights, reference_graph, AgentGraph,
};

/// Scalar agents with `f_i(t) = (1/n) sum (z - t)^2`, gradient `2 (t - mean z)`.
fn scalar_network(means: &[f64]) -> SensorNetwork {
    let locals = means
        .iter()
        .map(|&z| SensorProblem::new(vec![1.0], 1, 1, vec![z], 0.0).unwrap())
        .collect();
    SensorNetwork::new(locals).unwrap()
}

fn pair_coupling() -> CouplingMatrix {
    CouplingMatrix::from_dense(complete_graph(2).unwrap(), vec![0.7, 0.3, 0.3, 0.7]).unwrap()
}

fn zero_stepsize() -> PrivateParams {
    PrivateParams {
        stepsize: StepsizeRule::Deterministic {
            schedule: StepsizeSchedule::ConstantMean { value: 0.0 },
        },
        ..PrivateParams::standard(StepsizeSchedule::reference())
    }
}

fn state(xs: &[&[f64]]) -> NetworkState {
    NetworkState::new(0, xs.iter().map(|x| x.to_vec()).collect()).unwrap()
}

#[test]
fn zero_stepsize_is_pure_consensus() {
    let net = scalar_network(&[1.0, -2.0]);
    let w = pair_coupling();
    let s = state(&[&[0.4], &[-0.6]]);
    let round = private_round(&s, &w, &zero_stepsize(), &net, &RandomSource::new(1), 1.0).unwrap();
    assert!((round.next.iterate(0)[0] - (0.7 * 0.4 - 0.3 * 0.6)).abs() < 1e-15);
    assert!((round.next.iterate(1)[0] - (0.3 * 0.4 - 0.7 * 0.6)).abs() < 1e-15);
    assert!((round.next.mean()[0] - s.mean()[0]).abs() <= 1e-12);
}

#[test]
fn deterministic_coupling_mixing_matches_hand_expansion() {
    // Lambda = lambda I, b_ij = w_ij, full gradients: one step by hand.
    let net = scalar_network(&[1.0, -2.0]);
    let w = pair_coupling();
    let schedule = StepsizeSchedule::ConstantMean { value: 0.1 };
    let params = PrivateParams {
        stepsize: StepsizeRule::Deterministic { schedule },
        mixing: MixingRule::Coupling,
        batch: 1,
        gradient_noise: 0.0,
    };
    let (x1, x2) = (0.5, -0.25);
    let s = state(&[&[x1], &[x2]]);
    let round = private_round(&s, &w, &params, &net, &RandomSource::new(3), 1.0).unwrap();
    let (g1, g2) = (2.0 * (x1 - 1.0), 2.0 * (x2 + 2.0));
    let e1 = 0.7 * x1 + 0.3 * x2 - 0.1 * (0.7 * g1 + 0.3 * g2);
    let e2 = 0.3 * x1 + 0.7 * x2 - 0.1 * (0.3 * g1 + 0.7 * g2);
    assert!((round.next.iterate(0)[0] - e1).abs() < 1e-15);
    assert!((round.next.iterate(1)[0] - e2).abs() < 1e-15);
}

#[test]
fn two_rounds_agree_with_weighted_gradient_baseline() {
    let net = scalar_network(&[0.3, 1.7]);
    let w = pair_coupling();
    let params = PrivateParams {
        stepsize: StepsizeRule::Deterministic {
            schedule: StepsizeSchedule::harmonic(),
        },
        mixing: MixingRule::Coupling,
        batch: 1,
        gradient_noise: 0.0,
    };
    let src = RandomSource::new(0);
    let mut s = state(&[&[-0.8], &[0.9]]);
    let mut x = [-0.8, 0.9];
    let z = [0.3, 1.7];
    for k in 1..=2 {
        s = private_round(&s, &w, &params, &net, &src, 1.0)
            .unwrap()
            .next;
        let lambda = 1.0 / k as f64;
        let g = [2.0 * (x[0] - z[0]), 2.0 * (x[1] - z[1])];
        x = [
            0.7 * (x[0] - lambda * g[0]) + 0.3 * (x[1] - lambda * g[1]),
            0.3 * (x[0] - lambda * g[0]) + 0.7 * (x[1] - lambda * g[1]),
        ];
    }
    assert!((s.iterate(0)[0] - x[0]).abs() <= 1e-12);
    assert!((s.iterate(1)[0] - x[1]).abs() <= 1e-12);
}

#[test]
fn single_agent_is_centralized_sgd() {
    let p = SensorProblem::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![1.0, 2.0], 0.0).unwrap();
    let net = SensorNetwork::new(vec![p]).unwrap();
    let w = CouplingMatrix::from_dense(AgentGraph::single(), vec![1.0]).unwrap();
    let s = state(&[&[0.5, -0.5]]);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    let src = RandomSource::new(8);
    let round = private_round(&s, &w, &params, &net, &src, 1.0).unwrap();
    assert!(round.messages.is_empty());
    let draw = &round.draws[0];
    assert_eq!(draw.mixing.weights, vec![(0, 1.0)]);
    for c in 0..2 {
        let expected = s.iterate(0)[c] - draw.stepsize.diag[c] * draw.gradient[c];
        assert_eq!(round.next.iterate(0)[c], expected);
    }
    assert!(check_mean_dynamics(&s, &round.next, &round.draws) == 0.0);
}

#[test]
fn conventional_round_hand_expansion() {
    let net = scalar_network(&[1.0, -2.0]);
    let w = pair_coupling();
    let s = state(&[&[0.5], &[-0.25]]);
    let src = RandomSource::new(0);
    let r = conventional_round(&s, &w, 0.2, 1, &net, &src).unwrap();
    let (g1, g2) = (2.0 * (0.5 - 1.0), 2.0 * (-0.25 + 2.0));
    assert!((r.next.iterate(0)[0] - (0.7 * 0.5 + 0.3 * -0.25 - 0.2 * g1)).abs() < 1e-15);
    assert!((r.next.iterate(1)[0] - (0.3 * 0.5 + 0.7 * -0.25 - 0.2 * g2)).abs() < 1e-15);
    let r0 = conventional_round(&s, &w, 0.0, 1, &net, &src).unwrap();
    assert!((r0.next.iterate(0)[0] - (0.7 * 0.5 - 0.3 * 0.25)).abs() < 1e-15);
}

#[test]
fn conventional_single_agent_is_sgd() {
    let net = scalar_network(&[3.0]);
    let w = CouplingMatrix::from_dense(AgentGraph::single(), vec![1.0]).unwrap();
    let s = state(&[&[1.0]]);
    let r = conventional_round(&s, &w, 0.25, 1, &net, &RandomSource::new(0)).unwrap();
    assert_eq!(r.next.iterate(0)[0], 1.0 - 0.25 * 2.0 * (1.0 - 3.0));
}

#[test]
fn dimension_mismatch_is_reported() {
    let net = scalar_network(&[1.0, 2.0]);
    let w = metropolis_weights(&reference_graph()).unwrap();
    let s = state(&[&[0.0], &[0.0]]);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    assert!(matches!(
        private_round(&s, &w, &params, &net, &RandomSource::new(0), 1.0),
        Err(DsgdError::DimensionMismatch { .. })
    ));
    let w = pair_coupling();
    let s3 = state(&[&[0.0, 1.0], &[0.0, 1.0]]);
    assert!(matches!(
        conventional_round(&s3, &w, 0.1, 1, &net, &RandomSource::new(0)),
        Err(DsgdError::DimensionMismatch { .. })
    ));
}

fn sensor_setup() -> (SensorNetwork, CouplingMatrix) {
    let net = generate_sensor_data(&SensorSpec::default(), &RandomSource::new(21)).unwrap();
    let w = metropolis_weights(&reference_graph()).unwrap();
    (net, w)
}

#[test]
fn message_log_is_complete_and_excludes_self() {
    let (net, w) = sensor_setup();
    let src = RandomSource::new(5);
    let s = initial_state(5, 2, &src);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    let round = private_round(&s, &w, &params, &net, &src, 1.0).unwrap();
    let expected: usize = (0..5).map(|j| w.graph().neighbors(j).len() - 1).sum();
    assert_eq!(round.messages.len(), expected);
    assert!(round
        .messages
        .iter()
        .all(|m| m.sender != m.receiver && m.iteration == 1));
    assert_eq!(round.retained.len(), 5);
    assert!(round.retained.iter().all(|m| m.sender == m.receiver));
}

#[test]
fn altering_any_message_changes_its_receiver() {
    let (net, w) = sensor_setup();
    let src = RandomSource::new(6);
    let s = initial_state(5, 2, &src);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    let round = private_round(&s, &w, &params, &net, &src, 1.0).unwrap();
    let base = deliver(5, 2, round.messages.iter().chain(&round.retained));
    assert_eq!(base, round.next.iterates());
    for idx in 0..round.messages.len() {
        let mut msgs = round.messages.clone();
        msgs[idx].payload[0] += 1e-3;
        let altered = deliver(5, 2, msgs.iter().chain(&round.retained));
        let receiver = msgs[idx].receiver;
        for i in 0..5 {
            if i == receiver {
                assert_ne!(altered[i], base[i]);
            } else {
                assert_eq!(altered[i], base[i]);
            }
        }
    }
}

#[test]
fn mean_dynamics_hold_every_round() {
    let (net, w) = sensor_setup();
    let src = RandomSource::new(7);
    let mut s = initial_state(5, 2, &src);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    for _ in 0..200 {
        let round = private_round(&s, &w, &params, &net, &src, 1.0).unwrap();
        assert!(check_mean_dynamics(&s, &round.next, &round.draws) <= 1e-10);
        assert!(round.next.mean_cache_error() <= 1e-12);
        for d in &round.draws {
            assert!((d.mixing.total() - 1.0).abs() <= 1e-12);
        }
        s = round.next;
    }
}

#[test]
fn zero_horizon_records_initial_metrics_only() {
    let (net, w) = sensor_setup();
    let alg = Algorithm::Private(PrivateParams::standard(StepsizeSchedule::reference()));
    let opts = RunOptions {
        horizon: 0,
        ..RunOptions::default()
    };
    let out = run_single(&net, &w, alg, RandomSource::new(1), 1.0, &opts).unwrap();
    assert_eq!(out.trajectory.len(), 1);
    let init = initial_state(5, 2, &RandomSource::new(1));
    assert_eq!(out.trajectory.consensus_err()[0], init.consensus_error());
}

#[test]
fn trajectory_has_horizon_plus_one_nonnegative_rows() {
    let (net, w) = sensor_setup();
    let alg = Algorithm::Private(PrivateParams::standard(StepsizeSchedule::reference()));
    let opts = RunOptions {
        horizon: 50,
        log_messages: true,
        record_state: true,
        ..RunOptions::default()
    };
    let out = run_single(&net, &w, alg, RandomSource::new(2), 1.0, &opts).unwrap();
    assert_eq!(out.trajectory.len(), 51);
    for name in out.trajectory.names() {
        assert!(out
            .trajectory
            .column(name)
            .unwrap()
            .iter()
            .all(|v| *v >= 0.0));
    }
    assert_eq!(out.states.unwrap().len(), 51);
    assert_eq!(out.messages.unwrap().len(), 50 * w.graph().message_count());
}

#[test]
fn zero_stepsize_from_consensus_keeps_certificate_flat() {
    let (net, w) = sensor_setup();
    let start = NetworkState::new(0, vec![vec![0.2, -0.1]; 5]).unwrap();
    let mut sim = Simulation::from_state(
        &net,
        &w,
        Algorithm::Private(zero_stepsize()),
        RandomSource::new(0),
        start,
    )
    .unwrap();
    let gap0: f64 = sim
        .state()
        .mean()
        .iter()
        .zip(net.theta_star())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    for _ in 0..20 {
        sim.step().unwrap();
        assert!(sim.state().consensus_error() <= 1e-28);
        let gap: f64 = sim
            .state()
            .mean()
            .iter()
            .zip(net.theta_star())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((gap - gap0).abs() <= 1e-14);
    }
}

#[test]
fn repetitions_are_identical_across_thread_counts() {
    let (net, w) = sensor_setup();
    let alg = Algorithm::Private(PrivateParams::standard(StepsizeSchedule::reference()));
    let opts = RunOptions {
        horizon: 200,
        ..RunOptions::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_repetitions(&net, &w, alg, RandomSource::new(4), 6, &opts).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    let csv = |runs: &[RunOutput]| {
        let mut buf = Vec::new();
        aggregate(runs.iter().map(|r| &r.trajectory))
            .write_csv(&mut buf)
            .unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
}

#[test]
fn antithetic_pairs_share_everything_but_noise_sign() {
    let (net, w) = sensor_setup();
    let alg = Algorithm::Private(PrivateParams::noise_injection(
        StepsizeSchedule::harmonic(),
        0.1,
    ));
    let opts = RunOptions {
        horizon: 1,
        record_state: true,
        antithetic: true,
        ..RunOptions::default()
    };
    let runs = run_repetitions(&net, &w, alg, RandomSource::new(4), 2, &opts).unwrap();
    let a = runs[0].states.as_ref().unwrap();
    let b = runs[1].states.as_ref().unwrap();
    assert_eq!(a[0], b[0]);
    // Noise enters linearly, so the midpoint equals the noiseless step.
    let quiet = Algorithm::Private(PrivateParams::noise_injection(
        StepsizeSchedule::harmonic(),
        0.0,
    ));
    let q = run_single(&net, &w, quiet, RandomSource::new(4), 1.0, &opts).unwrap();
    let q = q.states.unwrap();
    for i in 0..5 {
        for c in 0..2 {
            let mid = 0.5 * (a[1].iterate(i)[c] + b[1].iterate(i)[c]);
            assert!((mid - q[1].iterate(i)[c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregate_mean_and_standard_error() {
    let mut a = Trajectory::new(vec!["consensus_err", "lambda_bar_mean"]);
    let mut b = a.clone();
    a.push_row(&[1.0, 0.5]);
    b.push_row(&[3.0, 0.5]);
    let agg = aggregate([&a, &b]);
    assert_eq!(agg.column("consensus_err").unwrap(), &[2.0]);
    // Sample std sqrt(2) over sqrt(2).
    assert!((agg.stderr_column("consensus_err").unwrap()[0] - 1.0).abs() < 1e-15);
    assert_eq!(agg.stderr_column("lambda_bar_mean").unwrap(), &[0.0]);
    let single = aggregate([&a]);
    assert_eq!(single.stderr_column("consensus_err").unwrap(), &[0.0]);
}

#[test]
fn trajectory_csv_schema() {
    let (net, w) = sensor_setup();
    let alg = Algorithm::Private(PrivateParams::standard(StepsizeSchedule::reference()));
    let opts = RunOptions {
        horizon: 3,
        ..RunOptions::default()
    };
    let out = run_single(&net, &w, alg, RandomSource::new(2), 1.0, &opts).unwrap();
    let mut buf = Vec::new();
    out.trajectory.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,consensus_err,mean_opt_gap,obj_gap,grad_norm_mean,grad_norm_avgfield,lambda_bar_mean"
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn random_graph_rounds_need_no_self_loops_in_input() {
    let g = build_graph(3, &[(1, 2), (2, 3)]).unwrap();
    let w = metropolis_weights(&g).unwrap();
    let net = scalar_network(&[0.0, 1.0, 2.0]);
    let s = state(&[&[0.0], &[0.0], &[0.0]]);
    let params = PrivateParams::standard(StepsizeSchedule::reference());
    let r = private_round(&s, &w, &params, &net, &RandomSource::new(0), 1.0).unwrap();
    assert_eq!(r.messages.len(), 4);
}
