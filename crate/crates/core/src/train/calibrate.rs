use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{sample_mask, Waveform};
use crate::error::{Error, Result};
use crate::models::WatermarkModels;
use crate::stats::DetectorCalibration;

use super::config::TrainConfig;
use super::corpus::SyntheticSpeech;

const HELD_OUT_SEED_OFFSET: u64 = 0x00C0_FFEE;

/// Clips disjoint from the training corpus: a differently seeded synthetic set,
/// or the tail of a WAV corpus.
pub fn held_out_clips(cfg: &TrainConfig, count: usize) -> Result<Vec<Waveform>> {
    match &cfg.corpus.dir {
        Some(_) => {
            let clips = super::corpus_clips(cfg)?;
            Ok(clips[clips.len().saturating_sub(count)..].to_vec())
        }
        None => {
            let s = &cfg.corpus.synthetic;
            Ok(SyntheticSpeech {
                sample_rate: cfg.model.sample_rate,
                clips: count,
                seed: s.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
                ..s.clone()
            }
            .generate())
        }
    }
}

/// Measures the localizer's frame-level rates: α on regenerated frames of
/// masked-decoded clips, β on every frame of the untouched clips.
pub fn calibrate(models: &WatermarkModels, clips: &[Waveform], ratio: f64, seed: u64, source: &str) -> Result<DetectorCalibration> {
    models.require_stage1()?;
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for clip in clips {
        let spec = models.analyze(clip)?;
        let clean = models.localizer_forward(&spec.magnitude)?;
        fp += clean.detected.len();
        neg += clean.scores.len();

        let codes = models.tokenize(&spec.magnitude)?;
        let mask = sample_mask(spec.frames(), ratio, rng.gen())?;
        let mag = models.masked_decode(&codes, &spec.magnitude, &mask)?;
        let samples = models.engine().istft_raw(&mag, &spec.phase, spec.num_samples)?;
        let marked = models.analyze(&Waveform::new(samples, clip.sample_rate())?)?;
        let out = models.localizer_forward(&marked.magnitude)?;
        tp += mask.positions().iter().filter(|&&t| out.scores[t] > out.threshold).count();
        pos += mask.count();
    }
    Ok(DetectorCalibration {
        alpha: tp as f64 / pos.max(1) as f64,
        beta: fp as f64 / neg.max(1) as f64,
        threshold: models.config.localizer_threshold,
        frames_positive: pos,
        frames_negative: neg,
        source: source.to_string(),
    })
}
