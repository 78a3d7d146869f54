//! Two-stage training: the autoencoder, localizer and restorer jointly under
//! distortions, then the masked-token manipulator on frozen stage-1 tokens.

mod calibrate;
mod config;
mod corpus;
mod log;
mod stage1;
mod stage2;

pub use calibrate::{calibrate, held_out_clips};
pub use config::{CalibrationConfig, CorpusConfig, Schedule, Stage1Config, Stage2Config, TrainConfig};
pub use corpus::{load_corpus, SyntheticSpeech};
pub use log::{StepRecord, TrainLog};
pub use stage1::{train_stage1, Stage1Report};
pub use stage2::{masked_accuracy, param_digest, tokenize_corpus, train_manipulator, train_stage2, Stage2Report};

use std::collections::BTreeMap;

use autograd::Tensor;
use rand::Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Training clips named by `cfg`: the WAV folder if set, else the synthetic generator.
pub fn corpus_clips(cfg: &TrainConfig) -> Result<Vec<Waveform>> {
    let clips = match &cfg.corpus.dir {
        Some(dir) => load_corpus(dir, cfg.model.sample_rate, cfg.corpus.resample)?,
        None => SyntheticSpeech { sample_rate: cfg.model.sample_rate, ..cfg.corpus.synthetic.clone() }.generate(),
    };
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(clips)
}

/// A random window of `len` samples, or the whole clip when it is shorter.
fn random_segment(clip: &Waveform, len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if clip.len() <= len {
        return Ok(clip.clone());
    }
    let start = rng.gen_range(0..=clip.len() - len);
    clip.segment(start, len)
}

/// Scales `grads` so their global norm is at most `max_norm` (0 disables). Returns the pre-clip norm.
fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = autograd::grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|t| t.scale_in_place(s));
    }
    norm
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    grads.values_mut().for_each(|t| t.scale_in_place(s));
}
