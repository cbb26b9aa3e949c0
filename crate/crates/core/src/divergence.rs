//! The beta-generalized KL divergence and the one-pixel analysis used to tune it.
//!
//! For per-class shape parameters `beta`, the divergence of the model
//! distribution `q` from the target `p` is
//!
//! ```text
//! L(p || q) = - sum_i  p_i / beta_i * ((q_i / p_i)^beta_i - 1)
//! ```
//!
//! with the `beta_i = 0` terms replaced by their limit `p_i ln(p_i / q_i)`, so
//! that `beta = 0` is exactly the KL divergence. Classes with `beta_i < 1` are
//! penalised sub-logarithmically, which bounds the pull of mislabeled samples.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// Loss-shaping vector for the benign (0) and malign (1) classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub beta0: f64,
    pub beta1: f64,
}

impl BetaParams {
    /// `beta0` must lie in `[0, 1)` and `beta1` in `[0, 1]`.
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        let params = BetaParams { beta0, beta1 };
        params.validate()?;
        Ok(params)
    }

    pub const KL: BetaParams = BetaParams {
        beta0: 0.0,
        beta1: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta0) {
            return Err(Error::InvalidArgument(format!(
                "beta0 = {} outside [0, 1)",
                self.beta0
            )));
        }
        if !(0.0..=1.0).contains(&self.beta1) {
            return Err(Error::InvalidArgument(format!(
                "beta1 = {} outside [0, 1]",
                self.beta1
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.beta0, self.beta1]
    }
}

/// A probability vector with at least two entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "distribution needs at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {bad} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(DiscreteDist { probs })
    }

    /// Two-class distribution `(1 - p1, p1)`.
    pub fn bernoulli(p1: f64) -> Result<Self> {
        Self::new(vec![1.0 - p1, p1])
    }

    /// Point mass on `class` out of `classes`.
    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Label-noise setting of the one-pixel model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSetting {
    /// Probability that a patch from a malign slide holds no malign pixel.
    pub gamma: f64,
    /// Fraction of benign slides.
    pub r: f64,
}

impl NoiseSetting {
    pub fn new(gamma: f64, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma = {gamma} outside [0, 1]"
            )));
        }
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidArgument(format!("r = {r} outside (0, 1)")));
        }
        Ok(NoiseSetting { gamma, r })
    }
}

/// Parameters of the one-pixel model: `theta0 = P(malign | benign pixel)` and
/// `theta1 = P(malign | malign pixel)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrivialModelParams {
    pub theta0: f64,
    pub theta1: f64,
}

impl TrivialModelParams {
    pub fn new(theta0: f64, theta1: f64) -> Result<Self> {
        check_open_unit("theta0", theta0)?;
        check_open_unit("theta1", theta1)?;
        Ok(TrivialModelParams { theta0, theta1 })
    }
}

fn check_open_unit(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} = {value} outside (0, 1)"
        )))
    }
}

fn check_inputs(p: &DiscreteDist, q: &DiscreteDist, beta: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    if beta.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: beta.len(),
        });
    }
    if let Some(b) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::InvalidArgument(format!("beta = {b} outside [0, 1]")));
    }
    Ok(())
}

/// Beta-generalized KL divergence `L_beta(p || q)`.
///
/// Terms with `p_i = 0` contribute nothing. Terms with `beta_i = 0` use the
/// logarithmic limit and fail with [`Error::InfiniteDivergence`] when `q_i = 0`.
pub fn beta_divergence(p: &DiscreteDist, q: &DiscreteDist, beta: &[f64]) -> Result<f64> {
    check_inputs(p, q, beta)?;
    let mut total = 0.0;
    for (i, ((&pi, &qi), &bi)) in p.probs.iter().zip(&q.probs).zip(beta).enumerate() {
        if pi == 0.0 {
            continue;
        }
        total += if bi == 0.0 {
            if qi == 0.0 {
                return Err(Error::InfiniteDivergence { index: i });
            }
            pi * (pi / qi).ln()
        } else if qi == 0.0 {
            pi / bi
        } else {
            // exp_m1 keeps the small-beta regime free of cancellation
            -(pi / bi) * (bi * (qi / pi).ln()).exp_m1()
        };
    }
    Ok(total)
}

/// Gradient of [`beta_divergence`] with respect to `q`:
/// `-(q_i / p_i)^(beta_i - 1)`, and `0` where `p_i = 0`.
///
/// Fails when `q_i = 0` under `p_i > 0` and `beta_i < 1`, where the slope is
/// unbounded.
pub fn beta_divergence_grad_q(
    p: &DiscreteDist,
    q: &DiscreteDist,
    beta: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(p, q, beta)?;
    p.probs
        .iter()
        .zip(&q.probs)
        .zip(beta)
        .enumerate()
        .map(|(i, ((&pi, &qi), &bi))| {
            if pi == 0.0 {
                Ok(0.0)
            } else if bi == 1.0 {
                Ok(-1.0)
            } else if qi == 0.0 {
                Err(Error::InfiniteDivergence { index: i })
            } else if bi == 0.0 {
                Ok(-pi / qi)
            } else {
                Ok(-(qi / pi).powf(bi - 1.0))
            }
        })
        .collect()
}

/// Expected divergence of the one-pixel model under the noisy generative
/// process: benign slides only produce benign pixels, malign slides produce a
/// benign pixel with probability `gamma`, and every pixel inherits its slide's
/// label as a one-hot target.
pub fn trivial_model_expected_loss(
    theta: &TrivialModelParams,
    noise: &NoiseSetting,
    beta: &BetaParams,
) -> Result<f64> {
    let b = beta.as_array();
    let benign = DiscreteDist::one_hot(0, 2)?;
    let malign = DiscreteDist::one_hot(1, 2)?;
    let q_benign_pixel = DiscreteDist::bernoulli(theta.theta0)?;
    let q_malign_pixel = DiscreteDist::bernoulli(theta.theta1)?;
    let r = noise.r;
    let g = noise.gamma;
    Ok(r * beta_divergence(&benign, &q_benign_pixel, &b)?
        + (1.0 - r) * g * beta_divergence(&malign, &q_benign_pixel, &b)?
        + (1.0 - r) * (1.0 - g) * beta_divergence(&malign, &q_malign_pixel, &b)?)
}

/// Stationarity residual in `theta0`:
/// `(1 - r) gamma theta0^(beta1 - 1) - r (1 - theta0)^(beta0 - 1)`.
///
/// This is the negated derivative of [`trivial_model_expected_loss`]; both
/// vanish at the same point and the residual is strictly decreasing on (0, 1).
pub fn trivial_model_stationarity_residual(
    theta0: f64,
    noise: &NoiseSetting,
    beta: &BetaParams,
) -> Result<f64> {
    check_open_unit("theta0", theta0)?;
    Ok(stationarity_residual_unchecked(
        theta0, noise, beta.beta0, beta.beta1,
    ))
}

fn stationarity_residual_unchecked(
    theta0: f64,
    noise: &NoiseSetting,
    beta0: f64,
    beta1: f64,
) -> f64 {
    (1.0 - noise.r) * noise.gamma * theta0.powf(beta1 - 1.0)
        - noise.r * (1.0 - theta0).powf(beta0 - 1.0)
}

/// Minimiser of the expected loss over `theta0`, found by bisection on the
/// stationarity residual.
pub fn optimal_theta0(noise: &NoiseSetting, beta: &BetaParams) -> Result<f64> {
    if noise.gamma <= 0.0 {
        return Err(Error::InvalidArgument("gamma must be > 0".into()));
    }
    const EPS: f64 = 1e-12;
    let f = |t: f64| stationarity_residual_unchecked(t, noise, beta.beta0, beta.beta1);
    let (mut lo, mut hi) = (EPS, 1.0 - EPS);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo > 0.0 && f_hi < 0.0) {
        return Err(Error::NoBracket);
    }
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The `beta1` that places the expected-loss minimum at `theta0_target`:
///
/// ```text
/// beta1 = [(beta0 - 1) ln(1 - t) - ln((1 - r) gamma / r)] / ln(t) + 1
/// ```
pub fn tune_beta1(theta0_target: f64, beta0: f64, noise: &NoiseSetting) -> Result<f64> {
    check_open_unit("theta0_target", theta0_target)?;
    if noise.gamma <= 0.0 {
        return Err(Error::InvalidArgument("gamma must be > 0".into()));
    }
    if !(0.0..1.0).contains(&beta0) {
        return Err(Error::InvalidArgument(format!(
            "beta0 = {beta0} outside [0, 1)"
        )));
    }
    let t = theta0_target;
    let odds = (1.0 - noise.r) * noise.gamma / noise.r;
    Ok(((beta0 - 1.0) * (1.0 - t).ln() - odds.ln()) / t.ln() + 1.0)
}

/// Optimal `theta0` for each `beta1` in `beta1s` at fixed `beta0`.
pub fn optimal_theta0_curve(
    noise: &NoiseSetting,
    beta0: f64,
    beta1s: &[f64],
) -> Result<Vec<(f64, f64)>> {
    beta1s
        .iter()
        .map(|&b1| {
            let beta = BetaParams::new(beta0, b1)?;
            Ok((b1, optimal_theta0(noise, &beta)?))
        })
        .collect()
}
