use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Upper bound of the mask ratio: at most half the frames are ever regenerated.
pub const MAX_MASK_RATIO: f64 = 0.5;

/// Frame-level binary mask; `true` marks a frame to be regenerated.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    flags: Vec<bool>,
    ratio: f64,
}

impl FrameMask {
    /// Mask with exactly the given frames set.
    pub fn from_positions(frames: usize, positions: &[usize]) -> Result<Self> {
        let mut flags = vec![false; frames];
        for &p in positions {
            if p >= frames {
                return Err(Error::InvalidArgument(format!("mask position {p} outside {frames} frames")));
            }
            flags[p] = true;
        }
        let ratio = if frames == 0 { 0.0 } else { positions.len() as f64 / frames as f64 };
        Ok(Self { flags, ratio })
    }

    pub fn none(frames: usize) -> Self {
        Self { flags: vec![false; frames], ratio: 0.0 }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Masked frame indices in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter_map(|(i, &f)| f.then_some(i)).collect()
    }

    /// 1.0 for masked frames, 0.0 elsewhere.
    pub fn weights(&self) -> Vec<f64> {
        self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }
}

/// Exactly `round(gamma·frames)` frames chosen uniformly without replacement.
pub fn sample_mask(frames: usize, gamma: f64, seed: u64) -> Result<FrameMask> {
    if frames == 0 {
        return Err(Error::InvalidArgument("mask needs at least one frame".into()));
    }
    if !(gamma > 0.0 && gamma <= MAX_MASK_RATIO) {
        return Err(Error::InvalidMaskRatio(gamma));
    }
    let count = (gamma * frames as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = rand::seq::index::sample(&mut rng, frames, count).into_vec();
    positions.sort_unstable();
    let mut mask = FrameMask::from_positions(frames, &positions)?;
    mask.ratio = gamma;
    Ok(mask)
}
