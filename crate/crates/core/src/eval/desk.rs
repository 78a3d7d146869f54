//! The desk-scale pipeline: both training stages, calibration, and the small set
//! of metrics used to check the system end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSimulator;
use crate::codec::{detect, embed, Placement, Selection};
use crate::error::Result;
use crate::manipulator::SamplingMode;
use crate::models::WatermarkModels;
use crate::stats::DetectorCalibration;
use crate::train::{
    calibrate, corpus_clips, held_out_clips, masked_accuracy, param_digest, tokenize_corpus, train_stage1,
    train_stage2, Stage1Report, Stage2Report, TrainConfig, TrainLog,
};

use super::metrics::{ber, spectral_distance, RunningMean};
use super::selection::{best_of_prefixes, select_positions_best_of_n};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskOptions {
    pub held_out: usize,
    pub ratio: f64,
    /// Best-of-n values reported; the largest bounds the candidates drawn.
    pub best_of: Vec<usize>,
}

impl Default for DeskOptions {
    fn default() -> Self {
        Self { held_out: 8, ratio: 0.1, best_of: vec![1, 5, 10] }
    }
}

/// Everything the desk run measures that does not depend on wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub stage1: Stage1Report,
    pub stage2: Stage2Report,
    pub param_digest: String,
    pub calibration: DetectorCalibration,
    /// Manipulator-argmax embedding, no distortion, payload length known.
    pub ber_manipulator: f64,
    pub ber_random: f64,
    /// Restorer parities read at the true positions.
    pub ber_known_positions: f64,
    pub spectral_distance_manipulator: f64,
    pub spectral_distance_random: f64,
    /// `(n, mean best-of-n SNR)` over the held-out clips.
    pub best_of_n_snr: Vec<(usize, f64)>,
    pub masked_accuracy: f64,
    pub mode_baseline: f64,
}

/// Trains from scratch with `cfg`, calibrates, and measures the held-out clips.
pub fn run_desk(cfg: &TrainConfig, sim: &AttackSimulator, opts: &DeskOptions, log: &mut TrainLog) -> Result<(WatermarkModels, DeskReport)> {
    cfg.validate()?;
    let clips = corpus_clips(cfg)?;
    let mut models = WatermarkModels::init(cfg.model.clone(), cfg.seed)?;
    let stage1 = train_stage1(&mut models, &clips, cfg, sim, log)?;
    let stage2 = train_stage2(&mut models, &clips, cfg, log)?;
    let held = held_out_clips(cfg, opts.held_out.max(cfg.calibration.clips))?;
    let source = if cfg.corpus.dir.is_some() { "corpus tail" } else { "synthetic held-out" };
    let calibration = calibrate(&models, &held[..cfg.calibration.clips], cfg.calibration.ratio, cfg.seed, source)?;
    models.calibration = Some(calibration.clone());
    let held = &held[..opts.held_out];
    let report = measure(&models, held, opts, cfg.seed, stage1, stage2, calibration)?;
    Ok((models, report))
}

fn measure(
    models: &WatermarkModels,
    held: &[crate::audio::Waveform],
    opts: &DeskOptions,
    seed: u64,
    stage1: Stage1Report,
    stage2: Stage2Report,
    calibration: DetectorCalibration,
) -> Result<DeskReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE5C);
    let manipulator = Selection::Manipulator { mode: SamplingMode::Argmax, seed };
    let random = Selection::RandomOpposite { seed };
    let (mut errs, mut errs_random, mut errs_known, mut sent) = (0.0, 0.0, 0.0, 0usize);
    let (mut sd_m, mut sd_r) = (RunningMean::default(), RunningMean::default());
    let n_max = opts.best_of.iter().copied().max().unwrap_or(1);
    let mut prefix_snr = vec![RunningMean::default(); n_max];
    for clip in held {
        let frames = models.config.stft.frames(clip.len());
        let l = ((opts.ratio * frames as f64).round() as usize).max(1);
        let bits: Vec<u8> = (0..l).map(|_| rng.gen_range(0..2)).collect();
        let placement = Placement::Random { seed: rng.gen() };
        let a = embed(models, clip, &bits, &placement, manipulator)?;
        let b = embed(models, clip, &bits, &placement, random)?;
        let ra = detect(models, &a.watermarked, Some(l))?;
        let rb = detect(models, &b.watermarked, Some(l))?;
        errs += ber(&bits, &ra.bits)? * l as f64;
        errs_random += ber(&bits, &rb.bits)? * l as f64;
        let known: Vec<u8> = a.plan.positions.iter().map(|&t| (ra.restorer.parity_probs[t] > 0.5) as u8).collect();
        errs_known += ber(&bits, &known)? * l as f64;
        sent += l;
        sd_m.push(spectral_distance(&a.original.magnitude, &a.magnitude, &a.plan.positions));
        sd_r.push(spectral_distance(&b.original.magnitude, &b.magnitude, &b.plan.positions));
        let best = select_positions_best_of_n(models, clip, &bits, n_max, rng.gen(), manipulator)?;
        for (acc, v) in prefix_snr.iter_mut().zip(best_of_prefixes(&best.candidate_snrs)) {
            acc.push(v);
        }
    }
    let sequences = tokenize_corpus(models, held)?;
    let (acc, baseline) = masked_accuracy(models, &sequences, opts.ratio, seed)?;
    let n = sent as f64;
    Ok(DeskReport {
        stage1,
        stage2,
        param_digest: param_digest(&models.params, None),
        calibration,
        ber_manipulator: errs / n,
        ber_random: errs_random / n,
        ber_known_positions: errs_known / n,
        spectral_distance_manipulator: sd_m.mean(),
        spectral_distance_random: sd_r.mean(),
        best_of_n_snr: opts.best_of.iter().map(|&k| (k, prefix_snr[k.max(1) - 1].mean())).collect(),
        masked_accuracy: acc,
        mode_baseline: baseline,
    })
}
