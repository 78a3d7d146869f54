//! Embedding bits into token parities and recovering them from audio.
//!
//! Bits are assigned to watermark positions in ascending frame order, and the
//! detector reads them back in the same order.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FrameMask, Spectrogram, Waveform, MAX_MASK_RATIO};
use crate::error::{Error, Result};
use crate::manipulator::{sample_parity_token, SamplingMode};
use crate::models::{LocalizerOutput, RestorerOutput, WatermarkModels};
use crate::stats::{verdict, DetectionVerdict, DEFAULT_Z_THRESHOLD};

/// Largest payload that fits in `frames` frames.
pub fn capacity(frames: usize) -> usize {
    (MAX_MASK_RATIO * frames as f64).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkPlan {
    pub bits: Vec<u8>,
    /// Strictly increasing frame indices, one per bit.
    pub positions: Vec<usize>,
    pub frames: usize,
}

impl WatermarkPlan {
    pub fn new(bits: Vec<u8>, positions: Vec<usize>, frames: usize) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidBits("payload must contain at least one bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidBits("bits must be 0 or 1".into()));
        }
        let cap = capacity(frames);
        if bits.len() > cap {
            return Err(Error::CapacityExceeded { requested: bits.len(), capacity: cap, frames });
        }
        if positions.len() != bits.len() {
            return Err(Error::InvalidPlan(format!("{} positions for {} bits", positions.len(), bits.len())));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) || positions.last().is_some_and(|&p| p >= frames) {
            return Err(Error::InvalidPlan(format!("positions must be strictly increasing and below {frames}")));
        }
        Ok(Self { bits, positions, frames })
    }

    /// Uniformly random positions for `bits`.
    pub fn random(bits: Vec<u8>, frames: usize, seed: u64) -> Result<Self> {
        let cap = capacity(frames);
        if bits.len() > cap {
            return Err(Error::CapacityExceeded { requested: bits.len(), capacity: cap, frames });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = index::sample(&mut rng, frames, bits.len()).into_vec();
        positions.sort_unstable();
        Self::new(bits, positions, frames)
    }

    /// Watermark ratio `L / T`.
    pub fn ratio(&self) -> f64 {
        self.bits.len() as f64 / self.frames as f64
    }

    pub fn mask(&self) -> FrameMask {
        FrameMask::from_positions(self.frames, &self.positions).expect("validated positions")
    }
}

/// Where the payload goes.
#[derive(Clone, Debug, PartialEq)]
pub enum Placement {
    Random { seed: u64 },
    Positions(Vec<usize>),
}

/// How a token with the wrong parity is replaced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selection", rename_all = "snake_case")]
pub enum Selection {
    /// Most plausible id of the required parity under the manipulator.
    Manipulator { mode: SamplingMode, seed: u64 },
    /// Uniformly random id of the required parity (ablation baseline).
    RandomOpposite { seed: u64 },
}

impl Default for Selection {
    fn default() -> Self {
        Self::Manipulator { mode: SamplingMode::Argmax, seed: 0 }
    }
}

/// Forces `ids[p] % 2 == bit` at every planned position, keeping ids that already
/// match and calling `replace(t, parity)` for the rest. Returns the new ids and
/// the number of substitutions.
pub fn embed_ids(
    ids: &[usize],
    plan: &WatermarkPlan,
    mut replace: impl FnMut(usize, u8) -> Result<usize>,
) -> Result<(Vec<usize>, usize)> {
    if ids.len() != plan.frames {
        return Err(Error::ShapeMismatch(format!("{} tokens for a plan over {} frames", ids.len(), plan.frames)));
    }
    let mut out = ids.to_vec();
    let mut substituted = 0;
    for (&t, &bit) in plan.positions.iter().zip(&plan.bits) {
        if out[t] % 2 != bit as usize {
            let id = replace(t, bit)?;
            if id % 2 != bit as usize {
                return Err(Error::InvalidArgument(format!("replacement {id} at frame {t} has the wrong parity")));
            }
            out[t] = id;
            substituted += 1;
        }
    }
    Ok((out, substituted))
}

/// Token parities at `positions`, in order.
pub fn read_parities(ids: &[usize], positions: &[usize]) -> Vec<u8> {
    positions.iter().map(|&t| (ids[t] % 2) as u8).collect()
}

fn random_of_parity(vocab: usize, parity: u8, rng: &mut impl Rng) -> Result<usize> {
    let count = (vocab + 1 - parity as usize) / 2;
    if count == 0 {
        return Err(Error::EmptyParityClass(parity));
    }
    Ok(2 * rng.gen_range(0..count) + parity as usize)
}

#[derive(Clone, Debug)]
pub struct EmbedOutput {
    pub watermarked: Waveform,
    pub plan: WatermarkPlan,
    pub original_ids: Vec<usize>,
    pub watermarked_ids: Vec<usize>,
    pub substituted: usize,
    pub original: Spectrogram,
    /// Magnitude fed to synthesis.
    pub magnitude: autograd::Tensor,
}

pub fn embed(
    models: &WatermarkModels,
    wave: &Waveform,
    bits: &[u8],
    placement: &Placement,
    selection: Selection,
) -> Result<EmbedOutput> {
    models.require_stage1()?;
    let spec = models.analyze(wave)?;
    let frames = spec.frames();
    let plan = match placement {
        Placement::Random { seed } => WatermarkPlan::random(bits.to_vec(), frames, *seed)?,
        Placement::Positions(p) => WatermarkPlan::new(bits.to_vec(), p.clone(), frames)?,
    };
    embed_with_plan(models, &spec, plan, selection)
}

/// Embedding into an already analyzed spectrogram.
pub fn embed_with_plan(
    models: &WatermarkModels,
    spec: &Spectrogram,
    plan: WatermarkPlan,
    selection: Selection,
) -> Result<EmbedOutput> {
    models.require_stage1()?;
    if plan.frames != spec.frames() {
        return Err(Error::InvalidPlan(format!("plan over {} frames, audio has {}", plan.frames, spec.frames())));
    }
    let codebook = models.codebook();
    let codes = codebook.quantize(&models.encode(&spec.magnitude)?)?;
    let mask = plan.mask();
    let vocab = codebook.size();
    let (ids, substituted) = match selection {
        Selection::Manipulator { mode, seed } => {
            models.require_stage2()?;
            let dist = models.predict_masked(codes.ids(), &mask)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            embed_ids(codes.ids(), &plan, |t, b| sample_parity_token(dist.row(t), b, mode, &mut rng))?
        }
        Selection::RandomOpposite { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            embed_ids(codes.ids(), &plan, |_, b| random_of_parity(vocab, b, &mut rng))?
        }
    };
    let new_codes = codebook.lookup(&ids)?;
    let magnitude = models.masked_decode(&new_codes, &spec.magnitude, &mask)?;
    let samples = models.engine().istft_raw(&magnitude, &spec.phase, spec.num_samples)?;
    let watermarked = Waveform::new(samples, models.config.sample_rate)?;
    Ok(EmbedOutput {
        watermarked,
        plan,
        original_ids: codes.ids().to_vec(),
        watermarked_ids: ids,
        substituted,
        original: spec.clone(),
        magnitude,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentPolicy {
    /// Bits read at exactly the frames above threshold.
    Threshold,
    /// Detected count differed from the expected length; the top-scoring
    /// frames were used instead.
    TopScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub expected: Option<usize>,
    pub detected: usize,
    pub policy: AlignmentPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub localizer: LocalizerOutput,
    pub restorer: RestorerOutput,
    /// Frames the bits were read from, ascending.
    pub positions: Vec<usize>,
    pub bits: Vec<u8>,
    /// Per-bit `max(p, 1 − p)` of the restorer.
    pub confidences: Vec<f64>,
    pub alignment: Alignment,
    /// Present when the models carry a detector calibration.
    pub verdict: Option<DetectionVerdict>,
}

impl DetectionReport {
    /// Bits from the thresholded frames, ignoring any alignment.
    pub fn raw_bits(&self) -> Vec<u8> {
        self.localizer.detected.iter().map(|&t| (self.restorer.parity_probs[t] > 0.5) as u8).collect()
    }
}

pub fn detect(models: &WatermarkModels, wave: &Waveform, expected: Option<usize>) -> Result<DetectionReport> {
    models.require_stage1()?;
    let spec = models.analyze(wave)?;
    detect_magnitude(models, &spec.magnitude, expected)
}

pub fn detect_magnitude(models: &WatermarkModels, magnitude: &autograd::Tensor, expected: Option<usize>) -> Result<DetectionReport> {
    let localizer = models.localizer_forward(magnitude)?;
    let restorer = models.restorer_forward(magnitude)?;
    let frames = localizer.scores.len();
    let detected = localizer.detected.len();
    let (positions, policy) = match expected {
        Some(l) if l > frames => {
            return Err(Error::InvalidArgument(format!("expected {l} bits but audio has only {frames} frames")))
        }
        Some(l) if l != detected => (top_scoring(&localizer.scores, l), AlignmentPolicy::TopScores),
        _ => (localizer.detected.clone(), AlignmentPolicy::Threshold),
    };
    let bits = positions.iter().map(|&t| (restorer.parity_probs[t] > 0.5) as u8).collect();
    let confidences = positions.iter().map(|&t| restorer.parity_probs[t].max(1.0 - restorer.parity_probs[t])).collect();
    let verdict = match &models.calibration {
        Some(c) => Some(verdict(detected, frames, c.effective_beta(), DEFAULT_Z_THRESHOLD)?),
        None => None,
    };
    Ok(DetectionReport {
        localizer,
        restorer,
        positions,
        bits,
        confidences,
        alignment: Alignment { expected, detected, policy },
        verdict,
    })
}

/// Indices of the `l` highest scores (ties to the earlier frame), ascending.
fn top_scoring(scores: &[f64], l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(l);
    order.sort_unstable();
    order
}

/// Parses `0`/`1` text or `0x`-prefixed hex (four bits per digit, most significant first).
pub fn parse_bits(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    let bits: Vec<u8> = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        let mut out = Vec::with_capacity(hex.len() * 4);
        for c in hex.chars() {
            let v = c.to_digit(16).ok_or_else(|| Error::InvalidBits(format!("bad hex digit {c:?}")))?;
            out.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        out
    } else {
        s.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(Error::InvalidBits(format!("unexpected character {c:?}"))),
            })
            .collect::<Result<_>>()?
    };
    if bits.is_empty() {
        return Err(Error::InvalidBits("empty payload".into()));
    }
    Ok(bits)
}

pub fn format_bits(bits: &[u8]) -> String {
    bits.iter().map(|b| if b & 1 == 1 { '1' } else { '0' }).collect()
}
