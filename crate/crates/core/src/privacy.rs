//! How much an observer of `y = lambda * g` can learn about `g` when
//! `g ~ U[-kappa, kappa]` and `lambda ~ U[0, 2 lambda_bar]` independently.
//!
//! All entropies are in nats. The conditional entropy `h(g | y)` is bounded
//! below by `ln(4 lambda_bar kappa^2) - 1 - h(y)`, and any estimator of `g`
//! from `y` has mean squared error at least `exp(2 h(g | y)) / (2 pi e)`.

use std::f64::consts::{E, PI};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{Purpose, RandomSource};

/// Absolute error target for the product-entropy integral.
const QUADRATURE_TARGET: f64 = 1e-9;
/// Error estimates above this are reported as failures.
const QUADRATURE_LIMIT: f64 = 1e-6;
/// Upper end of the substituted integral; the tail beyond is below 1e-15.
const SUBSTITUTION_CUTOFF: f64 = 40.0;
/// Samples per Monte Carlo chunk; each chunk owns one random stream.
const CHUNK: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid obfuscation law: {0}")]
    InvalidLaw(String),
    #[error("entropy of the product is -infinity when the mean stepsize is zero")]
    DegenerateLaw,
    #[error("quadrature error estimate {0:e} exceeds tolerance")]
    QuadratureFailure(f64),
    #[error("Monte Carlo needs at least {min_samples} samples and {min_bins} bins")]
    TooFewSamples { min_samples: usize, min_bins: usize },
}

/// Gradient entry uniform on `[-kappa, kappa]`, stepsize uniform on
/// `[0, 2 lambda_bar]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObfuscationLaw {
    lambda_bar: f64,
    kappa: f64,
}

impl ObfuscationLaw {
    /// Requires `kappa > 0`, `lambda_bar >= 0` and `2 lambda_bar <= kappa`.
    pub fn new(lambda_bar: f64, kappa: f64) -> Result<Self, PrivacyError> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(PrivacyError::InvalidLaw(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        if !(lambda_bar >= 0.0 && lambda_bar.is_finite()) {
            return Err(PrivacyError::InvalidLaw(format!(
                "mean stepsize must be nonnegative, got {lambda_bar}"
            )));
        }
        if 2.0 * lambda_bar > kappa {
            return Err(PrivacyError::InvalidLaw(format!(
                "2 * lambda_bar = {} exceeds kappa = {kappa}",
                2.0 * lambda_bar
            )));
        }
        Ok(Self { lambda_bar, kappa })
    }

    pub fn lambda_bar(&self) -> f64 {
        self.lambda_bar
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Half-width `2 lambda_bar kappa` of the product's support.
    pub fn support(&self) -> f64 {
        2.0 * self.lambda_bar * self.kappa
    }

    /// Prior variance of the gradient, `kappa^2 / 3`: the error of the
    /// estimator that ignores the observation.
    pub fn prior_variance(&self) -> f64 {
        self.kappa * self.kappa / 3.0
    }
}

/// `h(lambda, g) = ln(4 lambda_bar kappa^2) - 1`, the entropy of the pair
/// expressed in the `(product, gradient)` coordinates.
pub fn joint_entropy(law: &ObfuscationLaw) -> Result<f64, PrivacyError> {
    if law.lambda_bar == 0.0 {
        return Err(PrivacyError::DegenerateLaw);
    }
    Ok((4.0 * law.lambda_bar * law.kappa * law.kappa).ln() - 1.0)
}

/// Density of `y = lambda g`: `ln(2 lambda_bar kappa / |y|) / (4 lambda_bar kappa)`
/// on the open support, zero outside, `+inf` at the origin.
pub fn product_density(y: f64, law: &ObfuscationLaw) -> f64 {
    let a = law.support();
    if y == 0.0 {
        return f64::INFINITY;
    }
    if y.abs() >= a {
        return 0.0;
    }
    (a / y.abs()).ln() / (2.0 * a)
}

/// Differential entropy `c = h(lambda g)`.
///
/// With `y = A e^{-u}`, `A = 2 lambda_bar kappa`, the integral
/// `-2 int_0^A p ln p dy` becomes `-int_0^inf u e^{-u} ln(u / (2A)) du`,
/// which has no endpoint singularity.
pub fn product_entropy(law: &ObfuscationLaw) -> Result<f64, PrivacyError> {
    if law.lambda_bar == 0.0 {
        return Err(PrivacyError::DegenerateLaw);
    }
    let two_a = 2.0 * law.support();
    let integrand = |u: f64| {
        if u <= 0.0 {
            0.0
        } else {
            -u * (-u).exp() * (u / two_a).ln()
        }
    };
    let out = quadrature::double_exponential::integrate(
        integrand,
        0.0,
        SUBSTITUTION_CUTOFF,
        QUADRATURE_TARGET,
    );
    if !(out.error_estimate <= QUADRATURE_LIMIT) || !out.integral.is_finite() {
        return Err(PrivacyError::QuadratureFailure(out.error_estimate));
    }
    Ok(out.integral)
}

/// `theta(lambda_bar, kappa) = joint - c`. At `lambda_bar = 0` this is the
/// limit along `lambda_bar = (kappa/2) 10^{-n}`, `n = 1..8`, extrapolated
/// linearly to zero from the last two points.
pub fn conditional_entropy(law: &ObfuscationLaw) -> Result<f64, PrivacyError> {
    if law.lambda_bar > 0.0 {
        return Ok(joint_entropy(law)? - product_entropy(law)?);
    }
    let mut prev: Option<(f64, f64)> = None;
    let mut last = (0.0, 0.0);
    for n in 1..=8 {
        let lb = 0.5 * law.kappa * 10f64.powi(-n);
        let value = conditional_entropy(&ObfuscationLaw::new(lb, law.kappa)?)?;
        prev = (n > 1).then_some(last);
        last = (lb, value);
    }
    Ok(match prev {
        Some((l1, v1)) => {
            let (l2, v2) = last;
            v2 - (v1 - v2) * l2 / (l1 - l2)
        }
        None => last.1,
    })
}

/// `exp(2 theta) / (2 pi e)`.
pub fn mmse_from_entropy(theta: f64) -> f64 {
    (2.0 * theta).exp() / (2.0 * PI * E)
}

/// Lower bound on the mean squared error of any estimator of `g` from `y`.
pub fn mmse_lower_bound(law: &ObfuscationLaw) -> Result<f64, PrivacyError> {
    Ok(mmse_from_entropy(conditional_entropy(law)?))
}

/// Every privacy quantity for one law. Joint and product entropies are
/// `None` at `lambda_bar = 0`, where only their difference is finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBound {
    pub law: ObfuscationLaw,
    pub joint_entropy: Option<f64>,
    pub product_entropy: Option<f64>,
    pub conditional_entropy: f64,
    pub mmse_lower: f64,
}

pub fn privacy_bound(law: &ObfuscationLaw) -> Result<PrivacyBound, PrivacyError> {
    let (joint, product) = if law.lambda_bar > 0.0 {
        (Some(joint_entropy(law)?), Some(product_entropy(law)?))
    } else {
        (None, None)
    };
    let theta = conditional_entropy(law)?;
    if let (Some(j), Some(c)) = (joint, product) {
        debug_assert!((theta - (j - c)).abs() <= 1e-9);
    }
    Ok(PrivacyBound {
        law: *law,
        joint_entropy: joint,
        product_entropy: product,
        conditional_entropy: theta,
        mmse_lower: mmse_from_entropy(theta),
    })
}

/// How the stepsize is drawn in [`monte_carlo_mmse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepsizeDraw {
    /// `U[0, 2 lambda_bar]`, the obfuscating law.
    #[default]
    Uniform,
    /// Always `lambda_bar`; the observation reveals `g` up to binning.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmseEstimate {
    pub mmse: f64,
    /// Standard error of the mean squared residual.
    pub stderr: f64,
    /// Bins actually used (ties can merge bins).
    pub bins: usize,
}

/// Error of the binned conditional-mean estimator `E[g | y in bin]`, with
/// equal-probability bins of `y`. Coarsening the observation can only raise
/// the error, so this sits at or above the true MMSE.
pub fn monte_carlo_mmse(
    law: &ObfuscationLaw,
    samples: usize,
    bins: usize,
    draw: StepsizeDraw,
    source: &RandomSource,
) -> Result<MmseEstimate, PrivacyError> {
    if samples < 100_000 || bins < 50 {
        return Err(PrivacyError::TooFewSamples {
            min_samples: 100_000,
            min_bins: 50,
        });
    }
    let mut pairs: Vec<(f64, f64)> = sample_products(law, samples, draw, source);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Bin edges at equal counts, pushed forward past runs of equal y.
    let mut bounds = vec![0usize];
    for b in 1..bins {
        let mut cut = (b * samples) / bins;
        if cut <= *bounds.last().unwrap() {
            continue;
        }
        while cut < samples && pairs[cut].0 == pairs[cut - 1].0 {
            cut += 1;
        }
        if cut < samples && cut > *bounds.last().unwrap() {
            bounds.push(cut);
        }
    }
    bounds.push(samples);
    bounds.dedup();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for w in bounds.windows(2) {
        let chunk = &pairs[w[0]..w[1]];
        let mean = chunk.iter().map(|p| p.1).sum::<f64>() / chunk.len() as f64;
        for p in chunk {
            let r = (p.1 - mean) * (p.1 - mean);
            sum += r;
            sum_sq += r * r;
        }
    }
    let n = samples as f64;
    let mmse = sum / n;
    let var = (sum_sq / n - mmse * mmse).max(0.0) * n / (n - 1.0);
    Ok(MmseEstimate {
        mmse,
        stderr: (var / n).sqrt(),
        bins: bounds.len() - 1,
    })
}

/// `(y, g)` pairs, generated chunk by chunk from independent streams and
/// concatenated in chunk order.
pub fn sample_products(
    law: &ObfuscationLaw,
    samples: usize,
    draw: StepsizeDraw,
    source: &RandomSource,
) -> Vec<(f64, f64)> {
    let chunks = samples.div_ceil(CHUNK);
    let (lb, kappa) = (law.lambda_bar, law.kappa);
    let parts: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(samples - c * CHUNK);
            let mut rng = source.rng(c, 0, Purpose::MonteCarlo);
            (0..len)
                .map(|_| {
                    let g = kappa * (2.0 * rng.random::<f64>() - 1.0);
                    let lambda = match draw {
                        StepsizeDraw::Uniform => 2.0 * lb * rng.random::<f64>(),
                        StepsizeDraw::Fixed => lb,
                    };
                    (lambda * g, g)
                })
                .collect()
        })
        .collect();
    parts.concat()
}

/// One row of a bound grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub lambda_bar: f64,
    pub kappa: f64,
    pub outcome: Result<GridValues, PrivacyError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridValues {
    pub theta: f64,
    pub mmse_bound: f64,
    pub empirical: Option<MmseEstimate>,
}

/// Monte Carlo settings for a grid; `None` skips the empirical column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMonteCarlo {
    pub samples: usize,
    pub bins: usize,
}

/// Evaluates every `(lambda_bar, kappa)` pair. Invalid laws become rejected
/// rows rather than errors.
pub fn bound_grid(
    points: &[(f64, f64)],
    monte_carlo: Option<GridMonteCarlo>,
    source: &RandomSource,
) -> Vec<GridRow> {
    points
        .iter()
        .enumerate()
        .map(|(idx, &(lambda_bar, kappa))| {
            let outcome = ObfuscationLaw::new(lambda_bar, kappa).and_then(|law| {
                let bound = privacy_bound(&law)?;
                let empirical = monte_carlo
                    .map(|mc| {
                        monte_carlo_mmse(
                            &law,
                            mc.samples,
                            mc.bins,
                            StepsizeDraw::Uniform,
                            &source.for_repetition(idx as u64),
                        )
                    })
                    .transpose()?;
                Ok(GridValues {
                    theta: bound.conditional_entropy,
                    mmse_bound: bound.mmse_lower,
                    empirical,
                })
            });
            GridRow {
                lambda_bar,
                kappa,
                outcome,
            }
        })
        .collect()
}

/// `lambda_bar,kappa,theta,mmse_bound,mmse_empirical,mc_stderr,status`.
/// Rejected rows leave the numeric columns empty and explain in `status`.
pub fn write_grid_csv<W: std::io::Write>(rows: &[GridRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "lambda_bar",
        "kappa",
        "theta",
        "mmse_bound",
        "mmse_empirical",
        "mc_stderr",
        "status",
    ])?;
    for row in rows {
        let mut rec = vec![format!("{:?}", row.lambda_bar), format!("{:?}", row.kappa)];
        match &row.outcome {
            Ok(v) => {
                rec.push(format!("{:?}", v.theta));
                rec.push(format!("{:?}", v.mmse_bound));
                match v.empirical {
                    Some(e) => {
                        rec.push(format!("{:?}", e.mmse));
                        rec.push(format!("{:?}", e.stderr));
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
                rec.push("ok".into());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 4));
                rec.push(format!("rejected: {e}"));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
