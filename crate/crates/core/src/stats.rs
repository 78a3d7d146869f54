//! Utterance-level decisions from frame-level detections via a one-proportion Z-test.
//!
//! Under the null hypothesis (clean speech) each of `T` frames is flagged
//! independently with the localizer's false-positive rate `β`, so the flagged
//! count has mean `β·T` and variance `β(1−β)·T`. The statistic is the
//! normal-approximation score of the observed count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial as BinomialDist, DiscreteCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;

/// Lower clamp applied to a measured false-positive rate before it is used in the
/// Z-test. Below this rate the normal approximation understates the binomial upper
/// tail at a few hundred frames.
pub const MIN_EFFECTIVE_BETA: f64 = 0.02;

/// Frame-level rates of the localizer, measured on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    /// True-positive rate on watermarked frames (reporting only).
    pub alpha: f64,
    /// Measured false-positive rate on clean frames.
    pub beta: f64,
    pub threshold: f64,
    pub frames_positive: usize,
    pub frames_negative: usize,
    pub source: String,
}

impl DetectorCalibration {
    /// The rate the Z-test uses: the measured β clamped into
    /// `[MIN_EFFECTIVE_BETA, 1 − MIN_EFFECTIVE_BETA]`.
    pub fn effective_beta(&self) -> f64 {
        self.beta.clamp(MIN_EFFECTIVE_BETA, 1.0 - MIN_EFFECTIVE_BETA)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub count: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub beta: f64,
    pub z: f64,
    pub p: f64,
    pub decision: bool,
    pub threshold: f64,
}

/// `(count − β·T) / sqrt(β(1−β)·T)`.
pub fn z_statistic(count: usize, frames: usize, beta: f64) -> Result<f64> {
    if frames == 0 {
        return Err(Error::InvalidArgument("Z-test needs at least one frame".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::DegenerateRate(beta));
    }
    let t = frames as f64;
    Ok((count as f64 - beta * t) / (beta * (1.0 - beta) * t).sqrt())
}

/// Expected flagged count on a watermarked utterance: `α·m·T + β·(1−m)·T`.
pub fn expected_count(alpha: f64, beta: f64, ratio: f64, frames: usize) -> f64 {
    let t = frames as f64;
    alpha * ratio * t + beta * (1.0 - ratio) * t
}

/// One-sided upper-tail standard normal probability `P(Z > z)`.
pub fn p_value(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

pub fn utterance_decision(z: f64, threshold: f64) -> bool {
    z > threshold
}

/// Exact `P(X ≥ count)` for `X ~ Binomial(frames, beta)`.
pub fn binomial_p_value(count: usize, frames: usize, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::DegenerateRate(beta));
    }
    if count == 0 {
        return Ok(1.0);
    }
    let dist = BinomialDist::new(beta, frames as u64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sf(count as u64 - 1))
}

pub fn verdict(count: usize, frames: usize, beta: f64, threshold: f64) -> Result<DetectionVerdict> {
    if count > frames {
        return Err(Error::InvalidArgument(format!("count {count} exceeds {frames} frames")));
    }
    let z = z_statistic(count, frames, beta)?;
    // Clamp keeps the reported p-value inside (0, 1) for extreme z.
    let p = p_value(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    Ok(DetectionVerdict { count, frames, beta, z, p, decision: utterance_decision(z, threshold), threshold })
}

/// Fraction of simulated clean utterances whose statistic exceeds `threshold`.
/// Flag counts are drawn from `Binomial(frames, null_beta)` and tested with
/// `test_beta`, so the two can differ when the test clamps the measured rate.
pub fn null_false_positive_rate(
    frames: usize,
    null_beta: f64,
    test_beta: f64,
    threshold: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let dist = Binomial::new(frames as u64, null_beta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let count = dist.sample(&mut rng) as usize;
        if z_statistic(count, frames, test_beta)? > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials.max(1) as f64)
}
