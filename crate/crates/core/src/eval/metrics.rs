use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported in place of `+∞` when the test signal equals the reference.
pub const SNR_CAP_DB: f64 = 200.0;

/// Fraction of positions where the two bit strings differ.
pub fn ber(sent: &[u8], recovered: &[u8]) -> Result<f64> {
    if sent.is_empty() {
        return Err(Error::InvalidBits("cannot compute BER over zero bits".into()));
    }
    if sent.len() != recovered.len() {
        return Err(Error::ShapeMismatch(format!("{} sent bits vs {} recovered", sent.len(), recovered.len())));
    }
    let errors = sent.iter().zip(recovered).filter(|(a, b)| (*a & 1) != (*b & 1)).count();
    Ok(errors as f64 / sent.len() as f64)
}

/// BER when the recovered string may be shorter or longer than what was sent.
/// Compares the first `min` bits and counts every unrecovered bit as an error.
pub fn aligned_ber(sent: &[u8], recovered: &[u8]) -> Result<f64> {
    if sent.is_empty() {
        return Err(Error::InvalidBits("cannot compute BER over zero bits".into()));
    }
    let n = sent.len().min(recovered.len());
    let errors = sent[..n].iter().zip(&recovered[..n]).filter(|(a, b)| (*a & 1) != (*b & 1)).count();
    Ok((errors + sent.len() - n) as f64 / sent.len() as f64)
}

/// `10·log10(Σref² / Σ(ref − test)²)`, capped at [`SNR_CAP_DB`].
///
/// Panics on unequal lengths; use [`snr`] for a checked variant.
pub fn snr_db(reference: &[f64], test: &[f64]) -> f64 {
    assert_eq!(reference.len(), test.len(), "SNR needs equal lengths");
    let signal: f64 = reference.iter().map(|x| x * x).sum();
    let noise: f64 = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return SNR_CAP_DB;
    }
    if signal == 0.0 {
        return -SNR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).min(SNR_CAP_DB)
}

pub fn snr(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::ShapeMismatch(format!("SNR over {} vs {} samples", reference.len(), test.len())));
    }
    Ok(snr_db(reference, test))
}

/// Payload bits per second of audio.
pub fn bps(bits: usize, duration_secs: f64) -> f64 {
    bits as f64 / duration_secs
}

/// Real-time factor: processing wall time over audio duration.
pub fn rtf(wall_secs: f64, duration_secs: f64) -> f64 {
    wall_secs / duration_secs
}

/// Mean absolute log-magnitude difference over the given frames.
pub fn spectral_distance(a: &autograd::Tensor, b: &autograd::Tensor, frames: &[usize]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &t in frames {
        total += a.row(t).iter().zip(b.row(t)).map(|(x, y)| ((x + 1e-5).ln() - (y + 1e-5).ln()).abs()).sum::<f64>()
            / a.cols() as f64;
    }
    total / frames.len() as f64
}

/// Loose accumulator for per-distortion statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub sum: f64,
    pub count: usize,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}
