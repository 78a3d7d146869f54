use std::collections::BTreeMap;

use autograd::{accumulate_grads, Adam, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{sample_mask, Waveform};
use crate::error::{Error, Result};
use crate::manipulator::{self, masked_input, masked_token_loss, PREFIX};
use crate::models::WatermarkModels;

use super::config::TrainConfig;
use super::log::{StepRecord, TrainLog};
use super::{clip_grads, scale_grads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
}

/// SHA-256 over every parameter, in name order, skipping names that start with `exclude_prefix`.
pub fn param_digest(params: &ParamStore, exclude_prefix: Option<&str>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter().filter(|(n, _)| exclude_prefix.is_none_or(|p| !n.starts_with(p))) {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// Token sequences of every clip under the frozen stage-1 encoder.
pub fn tokenize_corpus(models: &WatermarkModels, clips: &[Waveform]) -> Result<Vec<Vec<usize>>> {
    clips.iter().map(|c| Ok(models.tokenize(&models.analyze(c)?.magnitude)?.ids().to_vec())).collect()
}

/// Stage 2: masked-token cross-entropy for the manipulator on stage-1 tokens.
///
/// Only `manipulator.*` parameters change.
pub fn train_stage2(models: &mut WatermarkModels, clips: &[Waveform], cfg: &TrainConfig, log: &mut TrainLog) -> Result<Stage2Report> {
    if models.state.stage1_steps == 0 {
        return Err(Error::MissingPrerequisite("stage-1 checkpoint required before stage 2".into()));
    }
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sequences = tokenize_corpus(models, clips)?;
    train_manipulator(models, &sequences, cfg, log)
}

/// Masked-token training of the manipulator on given token sequences.
pub fn train_manipulator(
    models: &mut WatermarkModels,
    sequences: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Stage2Report> {
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let vocab = models.config.codebook_size;
    if let Some(&k) = sequences.iter().flatten().find(|&&k| k >= vocab) {
        return Err(Error::InvalidArgument(format!("token {k} outside a vocabulary of {vocab}")));
    }
    let sequences: Vec<&Vec<usize>> = sequences.iter().filter(|s| !s.is_empty()).collect();
    let s2 = &cfg.stage2;
    let frozen = param_digest(&models.params, Some(PREFIX));
    let mcfg = models.config.manipulator.clone();
    let window = models
        .config
        .stft
        .frames((s2.clip_seconds * models.config.sample_rate as f64).round() as usize)
        .min(mcfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EC0_17D2);
    let mut adam = Adam::new(cfg.adam);
    let mut trainable = models.params.subset(PREFIX);
    let mut initial_total = f64::NAN;
    let mut final_total = f64::NAN;
    for step in 1..=s2.steps {
        let lr = s2.schedule.lr(step);
        let mut grads = BTreeMap::new();
        let mut total = 0.0;
        let mut gammas = Vec::with_capacity(s2.batch_size);
        for _ in 0..s2.batch_size {
            let seq = sequences[rng.gen_range(0..sequences.len())];
            let len = seq.len().min(window);
            let start = rng.gen_range(0..=seq.len() - len);
            let ids = &seq[start..start + len];
            let gamma = rng.gen_range(s2.gamma_min..=s2.gamma_max);
            let mask = sample_mask(len, gamma, rng.gen())?;
            let input = masked_input(ids, &mask, vocab)?;
            let mut g = Graph::new();
            let logits = manipulator::forward(&mut g, &trainable, &mcfg, &input)?;
            let loss = masked_token_loss(&mut g, logits, ids, &mask);
            total += g.value(loss).item();
            gammas.push(gamma);
            accumulate_grads(&mut grads, g.backward(loss).params());
        }
        let b = s2.batch_size as f64;
        total /= b;
        scale_grads(&mut grads, 1.0 / b);
        let norm = clip_grads(&mut grads, s2.grad_clip);
        if !total.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("cross-entropy {total}, grad norm {norm}") });
        }
        adam.step(&mut trainable, &grads, lr);
        if step == 1 {
            initial_total = total;
        }
        final_total = total;
        models.state.stage2_steps += 1;
        log.push(StepRecord {
            stage: 2,
            step,
            lr,
            total,
            components: vec![("ce".into(), total)],
            weights: Vec::new(),
            grad_norm: norm,
            mean_gamma: gammas.iter().sum::<f64>() / b,
            gammas,
            distortions: Vec::new(),
            revived_codes: Vec::new(),
        })?;
    }
    models.params.merge(trainable);
    if param_digest(&models.params, Some(PREFIX)) != frozen {
        return Err(Error::Diverged { step: s2.steps, detail: "stage-1 parameters changed during stage 2".into() });
    }
    log.flush()?;
    Ok(Stage2Report { steps: s2.steps, initial_total, final_total })
}

/// Top-1 accuracy of the manipulator at masked positions, and the accuracy of
/// always predicting the most frequent token.
pub fn masked_accuracy(models: &WatermarkModels, sequences: &[Vec<usize>], ratio: f64, seed: u64) -> Result<(f64, f64)> {
    let vocab = models.config.codebook_size;
    let mut freq = vec![0usize; vocab];
    sequences.iter().flatten().for_each(|&k| freq[k] += 1);
    let mode = (0..vocab).max_by_key(|&k| (freq[k], std::cmp::Reverse(k))).unwrap_or(0);
    let (mut hits, mut base, mut n) = (0usize, 0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seq in sequences {
        let mask = sample_mask(seq.len(), ratio, rng.gen())?;
        let dist = models.predict_masked(seq, &mask)?;
        for t in mask.positions() {
            let row = dist.row(t);
            let best = (0..vocab).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += (best == seq[t]) as usize;
            base += (mode == seq[t]) as usize;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((hits as f64 / n, base as f64 / n))
}
