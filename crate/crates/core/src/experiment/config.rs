//! TOML experiment configuration. Every key has a default, so an empty file
//! is a valid configuration of the small sensor experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::dsgd::{Algorithm, ConventionalParams, MixingRule, PrivateParams, StepsizeRule};
use crate::problems::{BlobSpec, SensorSpec};
use crate::randomization::{StepsizeMode, StepsizeSchedule};
use crate::topology::{
    build_graph, complete_graph, path_graph, reference_graph, ring_graph, AgentGraph,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Subcommand that produced a manifest; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Crate version that produced a manifest; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub seed: u64,
    pub horizon: u64,
    pub repetitions: usize,
    pub algorithm: AlgorithmKind,
    /// Run both algorithms on the same problem instance.
    pub compare: bool,
    pub log_messages: bool,
    pub record_state: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub output: PathBuf,
    pub graph: GraphConfig,
    pub problem: ProblemConfig,
    pub stepsize: StepsizeSchedule,
    pub private: PrivateConfig,
    pub conventional: ConventionalConfig,
    pub dp: DpConfig,
    pub privacy: PrivacyConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            version: None,
            seed: 0,
            horizon: 1000,
            repetitions: 20,
            algorithm: AlgorithmKind::Private,
            compare: true,
            log_messages: false,
            record_state: false,
            threads: 0,
            output: PathBuf::from("out"),
            graph: GraphConfig::Reference,
            problem: ProblemConfig::Sensor(SensorSpec::default()),
            stepsize: StepsizeSchedule::reference(),
            private: PrivateConfig::default(),
            conventional: ConventionalConfig::default(),
            dp: DpConfig::default(),
            privacy: PrivacyConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Private,
    Conventional,
}

impl AlgorithmKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Private => "private",
            Self::Conventional => "conventional",
        }
    }
}

/// Edges are 1-indexed; Metropolis weights are always used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphConfig {
    /// The five-agent example network.
    Reference,
    Ring {
        agents: usize,
    },
    Path {
        agents: usize,
    },
    Complete {
        agents: usize,
    },
    Edges {
        agents: usize,
        edges: Vec<(usize, usize)>,
    },
}

impl GraphConfig {
    pub fn build(&self) -> Result<AgentGraph, ExperimentError> {
        Ok(match self {
            Self::Reference => reference_graph(),
            Self::Ring { agents } => ring_graph(*agents)?,
            Self::Path { agents } => path_graph(*agents)?,
            Self::Complete { agents } => complete_graph(*agents)?,
            Self::Edges { agents, edges } => build_graph(*agents, edges)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Sensor(SensorSpec),
    Mlp(BlobSpec),
}

impl ProblemConfig {
    fn agents(&self) -> usize {
        match self {
            Self::Sensor(s) => s.agents,
            Self::Mlp(b) => b.agents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeKind {
    Random,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivateConfig {
    pub stepsize: StepsizeKind,
    pub mode: StepsizeMode,
    pub mixing: MixingRule,
    pub batch: usize,
    pub gradient_noise: f64,
}

impl Default for PrivateConfig {
    fn default() -> Self {
        Self {
            stepsize: StepsizeKind::Random,
            mode: StepsizeMode::DrawAroundMean,
            mixing: MixingRule::Random,
            batch: 1,
            gradient_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConventionalConfig {
    pub batch: usize,
}

impl Default for ConventionalConfig {
    fn default() -> Self {
        Self { batch: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    /// Gradient noise levels of the noise-injection scheme.
    pub sigmas: Vec<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    /// `[lambda_bar, kappa]` pairs.
    pub points: Vec<(f64, f64)>,
    pub monte_carlo: bool,
    pub samples: usize,
    pub bins: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let mut points = Vec::new();
        for kappa in [1.0, 5.0, 10.0] {
            for frac in [0.0, 0.01, 0.05, 0.1, 0.5] {
                points.push((frac * kappa, kappa));
            }
        }
        Self {
            points,
            monte_carlo: false,
            samples: 1_000_000,
            bins: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Grant the attacker the true iterates `x_j^k`.
    pub side_information: bool,
    /// Attack as this curious agent instead of as an eavesdropper.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observer: Option<usize>,
    /// Inputs; relative paths resolve against the output directory.
    pub messages: PathBuf,
    pub gradients: PathBuf,
    pub states: PathBuf,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            side_information: false,
            observer: None,
            messages: PathBuf::from("messages.csv"),
            gradients: PathBuf::from("gradients.csv"),
            states: PathBuf::from("states.csv"),
        }
    }
}

/// Mean-matched deterministic schedule: `PaperDefault` becomes
/// `scale / (k + offset)`.
pub fn deterministic_counterpart(schedule: StepsizeSchedule) -> StepsizeSchedule {
    match schedule {
        StepsizeSchedule::PaperDefault { scale, offset } => StepsizeSchedule::Custom {
            scale,
            offset,
            exponent: 1.0,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn private_params(&self) -> PrivateParams {
        let stepsize = match self.private.stepsize {
            StepsizeKind::Random => StepsizeRule::Random {
                schedule: self.stepsize,
                mode: self.private.mode,
            },
            StepsizeKind::Deterministic => StepsizeRule::Deterministic {
                schedule: self.stepsize,
            },
        };
        PrivateParams {
            stepsize,
            mixing: self.private.mixing,
            batch: self.private.batch,
            gradient_noise: self.private.gradient_noise,
        }
    }

    /// The baseline steps with the public mean of the same schedule.
    pub fn conventional_params(&self) -> ConventionalParams {
        ConventionalParams {
            schedule: self.stepsize,
            batch: self.conventional.batch,
        }
    }

    pub fn algorithm_params(&self, kind: AlgorithmKind) -> Algorithm {
        match kind {
            AlgorithmKind::Private => Algorithm::Private(self.private_params()),
            AlgorithmKind::Conventional => Algorithm::Conventional(self.conventional_params()),
        }
    }

    /// Noise-injection scheme at gradient noise `sigma`, batch shared with
    /// the private algorithm.
    pub fn noise_injection_params(&self, sigma: f64) -> PrivateParams {
        PrivateParams {
            batch: self.private.batch,
            ..PrivateParams::noise_injection(deterministic_counterpart(self.stepsize), sigma)
        }
    }

    /// Structural checks that need no data generation.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.horizon > 10_000_000 {
            return bad(format!("horizon {} is beyond desk scale", self.horizon));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed {} does not fit a TOML integer", self.seed));
        }
        let graph = self.graph.build()?;
        if graph.agents() != self.problem.agents() {
            return bad(format!(
                "graph has {} agents but problem.agents = {}",
                graph.agents(),
                self.problem.agents()
            ));
        }
        match &self.problem {
            ProblemConfig::Sensor(s) => {
                if s.samples_per_agent == 0 || s.measurement_dim == 0 || s.dim == 0 {
                    return bad("sensor sizes must be positive".into());
                }
                if !(s.regularization >= 0.0 && s.regularization.is_finite()) {
                    return bad(format!(
                        "regularization {} must be nonnegative",
                        s.regularization
                    ));
                }
            }
            ProblemConfig::Mlp(b) => {
                if b.train_per_agent == 0 || b.inputs == 0 || b.hidden.contains(&0) {
                    return bad("mlp sizes must be positive".into());
                }
                if !(b.weight_decay >= 0.0
                    && b.weight_decay.is_finite()
                    && b.separation.is_finite())
                {
                    return bad(
                        "mlp weight_decay and separation must be finite, weight_decay nonnegative"
                            .into(),
                    );
                }
            }
        }
        for kind in [AlgorithmKind::Private, AlgorithmKind::Conventional] {
            self.algorithm_params(kind).validate()?;
        }
        if let Some(s) = self
            .dp
            .sigmas
            .iter()
            .find(|s| !(**s >= 0.0 && s.is_finite()))
        {
            return bad(format!("dp sigma {s} must be finite and nonnegative"));
        }
        if self.privacy.monte_carlo && (self.privacy.samples < 100_000 || self.privacy.bins < 50) {
            return bad("monte carlo needs samples >= 100000 and bins >= 50".into());
        }
        if let Some(i) = self.attack.observer {
            if i >= graph.agents() {
                return bad(format!("observer {i} is not an agent"));
            }
        }
        Ok(())
    }
}
