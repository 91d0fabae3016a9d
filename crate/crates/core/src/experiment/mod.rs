//! Reproducible experiments: configuration, repetition, aggregation and CSV
//! output. Every command writes `manifest.toml` next to its outputs; running
//! the same command with that manifest as configuration reproduces the CSVs
//! byte for byte.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    deterministic_counterpart, AlgorithmKind, AttackConfig, ConventionalConfig, DpConfig,
    ExperimentConfig, GraphConfig, PrivacyConfig, PrivateConfig, ProblemConfig, StepsizeKind,
};

use crate::adversary::{
    attack_conventional, attack_curious, attack_private, attack_private_at, evaluate,
    read_truth_csv, write_truth_csv, AttackError, AttackReport, GradientTruth, MessageLog,
};
use crate::dsgd::{
    aggregate, run_repetitions, run_single, AggregateResult, Algorithm, DsgdError, NetworkState,
    PrivateParams, RoundRecord, RunOptions, Simulation,
};
use crate::privacy::{bound_grid, write_grid_csv, GridMonteCarlo, GridRow, PrivacyError};
use crate::problems::{
    generate_blob_data, generate_sensor_data, DistributedProblem, MlpNetwork, ProblemError,
    SensorNetwork,
};
use crate::rng::RandomSource;
use crate::topology::{metropolis_weights, CouplingMatrix, TopologyError};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Assumption(_) => 3,
            Self::Numerical(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

impl From<TopologyError> for ExperimentError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::DisconnectedGraph { .. } | TopologyError::AssumptionViolated(_) => {
                Self::Assumption(e.to_string())
            }
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<ProblemError> for ExperimentError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::SingularSystem(_) => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<DsgdError> for ExperimentError {
    fn from(e: DsgdError) -> Self {
        match e {
            DsgdError::Problem(p) => p.into(),
            DsgdError::Topology(t) => t.into(),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<PrivacyError> for ExperimentError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::InvalidLaw(_) => Self::Assumption(e.to_string()),
            PrivacyError::TooFewSamples { .. } => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<AttackError> for ExperimentError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::ZeroStepsize(_) => Self::Assumption(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Subcommands that produce outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    RunConvex,
    RunNonconvex,
    PrivacyBound,
    AttackEval,
    DpCompare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::RunConvex => "run-convex",
            Self::RunNonconvex => "run-nonconvex",
            Self::PrivacyBound => "privacy-bound",
            Self::AttackEval => "attack-eval",
            Self::DpCompare => "dp-compare",
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, ExperimentError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes the resolved configuration, stamped with command and version.
pub fn write_manifest(
    config: &ExperimentConfig,
    command: Command,
) -> Result<PathBuf, ExperimentError> {
    let mut stamped = config.clone();
    stamped.command = Some(command.name().into());
    stamped.version = Some(env!("CARGO_PKG_VERSION").into());
    let path = config.output.join("manifest.toml");
    let mut f = create(&config.output, "manifest.toml")?;
    f.write_all(stamped.to_toml()?.as_bytes())?;
    f.flush()?;
    Ok(path)
}

fn prepare(config: &ExperimentConfig, command: Command) -> Result<(), ExperimentError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output)?;
    write_manifest(config, command)?;
    Ok(())
}

/// Runs `f` on a pool of `config.threads` workers.
fn with_pool<T: Send>(
    config: &ExperimentConfig,
    f: impl FnOnce() -> Result<T, ExperimentError> + Send,
) -> Result<T, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    pool.install(f)
}

pub fn coupling_for(config: &ExperimentConfig) -> Result<CouplingMatrix, ExperimentError> {
    Ok(metropolis_weights(&config.graph.build()?)?)
}

/// Problem data comes from the `Data` streams of the base seed, so every
/// repetition shares one instance.
pub fn sensor_for(config: &ExperimentConfig) -> Result<SensorNetwork, ExperimentError> {
    match &config.problem {
        ProblemConfig::Sensor(spec) => {
            Ok(generate_sensor_data(spec, &RandomSource::new(config.seed))?)
        }
        ProblemConfig::Mlp(_) => Err(ExperimentError::Config(
            "this command needs problem.kind = \"sensor\"".into(),
        )),
    }
}

pub fn mlp_for(config: &ExperimentConfig) -> Result<MlpNetwork, ExperimentError> {
    match &config.problem {
        ProblemConfig::Mlp(spec) => Ok(generate_blob_data(spec, &RandomSource::new(config.seed))?),
        ProblemConfig::Sensor(_) => Err(ExperimentError::Config(
            "this command needs problem.kind = \"mlp\"".into(),
        )),
    }
}

/// Aggregated curves per algorithm, in the order they were run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveOutcome {
    pub curves: Vec<(AlgorithmKind, AggregateResult)>,
}

impl CurveOutcome {
    pub fn get(&self, kind: AlgorithmKind) -> Option<&AggregateResult> {
        self.curves.iter().find(|(k, _)| *k == kind).map(|(_, a)| a)
    }
}

fn check_finite(name: &str, result: &AggregateResult) -> Result<(), ExperimentError> {
    for (n, col) in result.names.iter().zip(&result.mean) {
        if let Some(k) = col.iter().position(|v| !v.is_finite()) {
            return Err(ExperimentError::Numerical(format!(
                "{name}: {n} is not finite at k = {k}"
            )));
        }
    }
    Ok(())
}

fn write_states(states: &[NetworkState], out: impl Write) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    let d = states.first().map_or(0, NetworkState::dim);
    let mut header = vec!["k".to_string(), "agent".into()];
    header.extend((0..d).map(|c| format!("x{c}")));
    w.write_record(&header)?;
    for s in states {
        for (i, x) in s.iterates().iter().enumerate() {
            let mut rec = vec![s.iteration().to_string(), i.to_string()];
            rec.extend(x.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of the `states.csv` writer.
pub fn read_states(input: impl std::io::Read) -> Result<Vec<NetworkState>, ExperimentError> {
    let bad = |m: String| ExperimentError::Config(format!("states file: {m}"));
    let mut r = csv::Reader::from_reader(input);
    let mut grouped: Vec<(u64, Vec<Vec<f64>>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let k: u64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("bad iteration {}", &rec[0])))?;
        let x = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value {s}"))))
            .collect::<Result<Vec<_>, _>>()?;
        match grouped.last_mut() {
            Some((last, xs)) if *last == k => xs.push(x),
            _ => grouped.push((k, vec![x])),
        }
    }
    grouped
        .into_iter()
        .map(|(k, xs)| NetworkState::new(k, xs).map_err(ExperimentError::from))
        .collect()
}

fn run_curves<P: DistributedProblem>(
    config: &ExperimentConfig,
    problem: &P,
    coupling: &CouplingMatrix,
) -> Result<CurveOutcome, ExperimentError> {
    let kinds = if config.compare {
        vec![AlgorithmKind::Private, AlgorithmKind::Conventional]
    } else {
        vec![config.algorithm]
    };
    let source = RandomSource::new(config.seed);
    let options = RunOptions {
        horizon: config.horizon,
        ..RunOptions::default()
    };
    let mut curves = Vec::new();
    for kind in kinds {
        let algorithm = config.algorithm_params(kind);
        let runs = with_pool(config, || {
            Ok(run_repetitions(
                problem,
                coupling,
                algorithm,
                source,
                config.repetitions,
                &options,
            )?)
        })?;
        let agg = aggregate(runs.iter().map(|r| &r.trajectory));
        check_finite(kind.name(), &agg)?;
        agg.write_csv(create(&config.output, &format!("{}.csv", kind.name()))?)?;
        agg.write_stderr_csv(create(
            &config.output,
            &format!("{}_stderr.csv", kind.name()),
        )?)?;
        curves.push((kind, agg));
    }
    if config.log_messages || config.record_state {
        // Repetition 0 again, this time keeping what an observer would log.
        let logged = RunOptions {
            horizon: config.horizon,
            log_messages: config.log_messages,
            record_state: config.record_state,
            record_gradients: true,
            antithetic: false,
        };
        let out = run_single(
            problem,
            coupling,
            config.algorithm_params(config.algorithm),
            source.for_repetition(0),
            1.0,
            &logged,
        )?;
        if let Some(messages) = out.messages {
            MessageLog::new(messages)?.write_csv(create(&config.output, "messages.csv")?)?;
        }
        if let Some(states) = &out.states {
            write_states(states, create(&config.output, "states.csv")?)?;
        }
        if let Some(g) = &out.gradients {
            write_truth_csv(g, create(&config.output, "gradients.csv")?)?;
        }
    }
    Ok(CurveOutcome { curves })
}

/// Sensor experiment: curves, `theta_star.csv`, `coupling.csv` and the
/// generated data in `sensor_data.csv`.
pub fn run_convex(config: &ExperimentConfig) -> Result<CurveOutcome, ExperimentError> {
    prepare(config, Command::RunConvex)?;
    let coupling = coupling_for(config)?;
    let problem = sensor_for(config)?;
    coupling.write_csv(create(&config.output, "coupling.csv")?)?;
    problem.write_csv(create(&config.output, "sensor_data.csv")?)?;
    let mut w = csv::Writer::from_writer(create(&config.output, "theta_star.csv")?);
    w.write_record(["coordinate", "theta_star"])?;
    for (c, v) in problem.theta_star().iter().enumerate() {
        w.write_record([c.to_string(), format!("{v:?}")])?;
    }
    w.flush()?;
    run_curves(config, &problem, &coupling)
}

/// Classifier experiment: curves with accuracy columns, `coupling.csv` and
/// the generated data in `blob_data.csv`.
pub fn run_nonconvex(config: &ExperimentConfig) -> Result<CurveOutcome, ExperimentError> {
    prepare(config, Command::RunNonconvex)?;
    let coupling = coupling_for(config)?;
    let problem = mlp_for(config)?;
    coupling.write_csv(create(&config.output, "coupling.csv")?)?;
    problem.write_csv(create(&config.output, "blob_data.csv")?)?;
    run_curves(config, &problem, &coupling)
}

/// `privacy_bound.csv`. Rejected laws stay in the table; a quadrature
/// failure is reported after the table is written.
pub fn privacy_table(config: &ExperimentConfig) -> Result<Vec<GridRow>, ExperimentError> {
    prepare(config, Command::PrivacyBound)?;
    let mc = config.privacy.monte_carlo.then_some(GridMonteCarlo {
        samples: config.privacy.samples,
        bins: config.privacy.bins,
    });
    let rows = with_pool(config, || {
        Ok(bound_grid(
            &config.privacy.points,
            mc,
            &RandomSource::new(config.seed),
        ))
    })?;
    write_grid_csv(&rows, create(&config.output, "privacy_bound.csv")?)?;
    if let Some(e) = rows.iter().find_map(|r| match &r.outcome {
        Err(e @ (PrivacyError::QuadratureFailure(_) | PrivacyError::DegenerateLaw)) => {
            Some(e.clone())
        }
        _ => None,
    }) {
        return Err(e.into());
    }
    Ok(rows)
}

fn resolve(config: &ExperimentConfig, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.output.join(p)
    }
}

fn open(path: &Path) -> Result<File, ExperimentError> {
    File::open(path).map_err(|e| {
        ExperimentError::Config(format!(
            "{}: {e} (produce it with log_messages / record_state)",
            path.display()
        ))
    })
}

/// Scores the configured attack on logged outputs of an earlier run with the
/// same configuration; writes `attack.csv`.
pub fn attack_eval(config: &ExperimentConfig) -> Result<AttackReport, ExperimentError> {
    config.validate()?;
    let coupling = coupling_for(config)?;
    let sensor = match &config.problem {
        ProblemConfig::Sensor(_) => Some(sensor_for(config)?),
        ProblemConfig::Mlp(_) => None,
    };
    let truth = read_truth_csv(open(&resolve(config, &config.attack.gradients))?)?;
    let needs_states =
        config.attack.side_information || config.algorithm == AlgorithmKind::Conventional;
    let states = if needs_states {
        Some(read_states(open(&resolve(config, &config.attack.states))?)?)
    } else {
        None
    };
    let estimates = match config.algorithm {
        AlgorithmKind::Conventional => {
            let states = states.as_deref().unwrap_or_default();
            let stepsizes: Vec<f64> = (1..states.len() as u64)
                .map(|k| config.stepsize.public_mean(k))
                .collect();
            attack_conventional(states, &coupling, &stepsizes)?
        }
        AlgorithmKind::Private => {
            let log = MessageLog::read_csv(open(&resolve(config, &config.attack.messages))?)?;
            let params = config.private_params();
            let side = if config.attack.side_information {
                states.as_deref()
            } else {
                None
            };
            match config.attack.observer {
                Some(i) => attack_curious(&log, i, &coupling, &params, side)?,
                None => attack_private(&log, &coupling, &params, side)?,
            }
        }
    };
    let report = evaluate(&estimates, &truth, sensor.as_ref().map(|s| s.locals()))?;
    std::fs::create_dir_all(&config.output)?;
    write_manifest(config, Command::AttackEval)?;
    report.write_csv(create(&config.output, "attack.csv")?)?;
    Ok(report)
}

/// Which update a comparison row used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    NoiseInjection { sigma: f64 },
    Private,
}

/// Run-level means over repetitions with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DpRow {
    pub scheme: Scheme,
    /// Final `F(x_bar) - F*` (sensor only).
    pub opt_gap: Option<(f64, f64)>,
    /// Final training loss and validation accuracy (classifier only).
    pub train_loss: Option<(f64, f64)>,
    pub validation_accuracy: Option<(f64, f64)>,
    /// Per-coordinate squared error of the inverted gradients, averaged over
    /// agents and iterations.
    pub attack_mse: (f64, f64),
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct RepetitionSummary {
    final_metrics: Vec<f64>,
    attack_mse: f64,
}

/// One run, attacked round by round so message logs never accumulate.
fn attacked_run<P: DistributedProblem>(
    problem: &P,
    coupling: &CouplingMatrix,
    params: PrivateParams,
    source: RandomSource,
    noise_sign: f64,
    horizon: u64,
    side_information: bool,
) -> Result<RepetitionSummary, ExperimentError> {
    let mut sim = Simulation::new(problem, coupling, Algorithm::Private(params), source)?
        .with_noise_sign(noise_sign);
    let mut sq = 0.0;
    let mut count = 0usize;
    for _ in 0..horizon {
        let before = sim.state().clone();
        let RoundRecord::Private(round) = sim.step()? else {
            unreachable!("private algorithm produces private rounds")
        };
        let k = round.next.iteration();
        let log = MessageLog::new(round.messages)?;
        let side = side_information.then_some(&before);
        let estimates = attack_private_at(&log, k, coupling, &params, side)?;
        let truth: GradientTruth = round
            .draws
            .into_iter()
            .map(|d| ((k, d.agent), d.gradient))
            .collect();
        let report = evaluate(&estimates, &truth, None)?;
        sq += report.rows.iter().map(|r| r.mse_gradient).sum::<f64>();
        count += report.rows.len();
    }
    let mean = sim.state().mean().to_vec();
    let mut final_metrics = Vec::new();
    final_metrics.push(problem.objective_gap(&mean).unwrap_or(f64::NAN));
    match problem.accuracy(&mean) {
        Some(a) => final_metrics.extend([a.train_loss, a.validation]),
        None => final_metrics.extend([f64::NAN, f64::NAN]),
    }
    Ok(RepetitionSummary {
        final_metrics,
        attack_mse: if count == 0 { 0.0 } else { sq / count as f64 },
    })
}

fn compare_scheme<P: DistributedProblem>(
    config: &ExperimentConfig,
    problem: &P,
    coupling: &CouplingMatrix,
    scheme: Scheme,
) -> Result<DpRow, ExperimentError> {
    let source = RandomSource::new(config.seed);
    let (params, antithetic) = match scheme {
        Scheme::NoiseInjection { sigma } => (config.noise_injection_params(sigma), true),
        Scheme::Private => (config.private_params(), false),
    };
    let summaries: Vec<RepetitionSummary> = (0..config.repetitions as u64)
        .into_par_iter()
        .map(|r| {
            let (src, sign) = if antithetic {
                (
                    source.for_repetition(r / 2),
                    if r % 2 == 0 { 1.0 } else { -1.0 },
                )
            } else {
                (source.for_repetition(r), 1.0)
            };
            attacked_run(
                problem,
                coupling,
                params,
                src,
                sign,
                config.horizon,
                config.attack.side_information,
            )
        })
        .collect::<Result<_, _>>()?;
    let column = |c: usize| -> Option<(f64, f64)> {
        let xs: Vec<f64> = summaries.iter().map(|s| s.final_metrics[c]).collect();
        xs.iter().all(|v| !v.is_nan()).then(|| mean_se(&xs))
    };
    let attack: Vec<f64> = summaries.iter().map(|s| s.attack_mse).collect();
    Ok(DpRow {
        scheme,
        opt_gap: column(0),
        train_loss: column(1),
        validation_accuracy: column(2),
        attack_mse: mean_se(&attack),
    })
}

fn write_dp_rows(rows: &[DpRow], out: impl Write) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scheme",
        "sigma",
        "opt_gap",
        "opt_gap_stderr",
        "train_loss",
        "train_loss_stderr",
        "validation_accuracy",
        "validation_accuracy_stderr",
        "attack_mse",
        "attack_mse_stderr",
    ])?;
    let pair = |p: Option<(f64, f64)>| match p {
        Some((m, s)) => [format!("{m:?}"), format!("{s:?}")],
        None => [String::new(), String::new()],
    };
    for r in rows {
        let (name, sigma) = match r.scheme {
            Scheme::NoiseInjection { sigma } => ("noise_injection", format!("{sigma:?}")),
            Scheme::Private => ("private", String::new()),
        };
        let mut rec = vec![name.to_string(), sigma];
        rec.extend(pair(r.opt_gap));
        rec.extend(pair(r.train_loss));
        rec.extend(pair(r.validation_accuracy));
        rec.extend(pair(Some(r.attack_mse)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Noise-injection scheme at every configured noise level, then the private
/// algorithm, on one problem instance; writes `dp_compare.csv`.
///
/// Noise-injection repetitions come in antithetic pairs sharing every random
/// stream with opposite noise sign, and all noise levels share streams, so
/// differences between levels reflect the noise alone.
pub fn dp_compare(config: &ExperimentConfig) -> Result<Vec<DpRow>, ExperimentError> {
    prepare(config, Command::DpCompare)?;
    let coupling = coupling_for(config)?;
    let mut schemes: Vec<Scheme> = config
        .dp
        .sigmas
        .iter()
        .map(|&sigma| Scheme::NoiseInjection { sigma })
        .collect();
    schemes.push(Scheme::Private);
    let rows = with_pool(config, || match &config.problem {
        ProblemConfig::Sensor(_) => {
            let problem = sensor_for(config)?;
            schemes
                .iter()
                .map(|s| compare_scheme(config, &problem, &coupling, *s))
                .collect::<Result<Vec<_>, _>>()
        }
        ProblemConfig::Mlp(_) => {
            let problem = mlp_for(config)?;
            schemes
                .iter()
                .map(|s| compare_scheme(config, &problem, &coupling, *s))
                .collect::<Result<Vec<_>, _>>()
        }
    })?;
    write_dp_rows(&rows, create(&config.output, "dp_compare.csv")?)?;
    Ok(rows)
}

/// Dispatches a command.
pub fn execute(config: &ExperimentConfig, command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::RunConvex => run_convex(config).map(drop),
        Command::RunNonconvex => run_nonconvex(config).map(drop),
        Command::PrivacyBound => privacy_table(config).map(drop),
        Command::AttackEval => attack_eval(config).map(drop),
        Command::DpCompare => dp_compare(config).map(drop),
    }
}
