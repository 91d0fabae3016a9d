//! Decentralized stochastic gradient descent with randomized stepsizes and
//! mixing weights, plus the tools to measure what an observer can infer from
//! the exchanged messages.

pub mod adversary;
pub mod dsgd;
pub mod experiment;
pub mod privacy;
pub mod problems;
pub mod randomization;
pub mod rng;
pub mod topology;
