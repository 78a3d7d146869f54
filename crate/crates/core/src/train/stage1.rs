use std::collections::BTreeMap;

use autograd::{accumulate_grads, Adam, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{draw_spec, AttackSimulator, DistortionKind, DistortionSpec};
use crate::audio::diff::{istft_fixed_phase, stft_magnitude};
use crate::audio::{sample_mask, FrameMask, Waveform};
use crate::error::{Error, Result};
use crate::models::{localizer_loss, restorer_loss, WatermarkModels, CODEBOOK};
use crate::vq::{quantize_graph, vq_loss, Codebook, MultiResolutionStft, FEATURE_FLOOR};

use super::config::TrainConfig;
use super::log::{StepRecord, TrainLog};
use super::{clip_grads, random_segment, scale_grads};

const ANALYSIS_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub steps: usize,
    pub final_total: f64,
    /// Distortions dropped from the catalog because their backend is missing.
    pub skipped_distortions: Vec<DistortionKind>,
    pub revived_codes: usize,
}

struct ClipOutcome {
    grads: BTreeMap<String, Tensor>,
    /// loc, res, rec, codebook, commitment, total
    losses: [f64; 6],
    latents: Tensor,
    ids: Vec<usize>,
}

/// Replacement ids for the masked frames of one clip: either a uniformly random
/// id or, where `nearest` is set, the closest code of the other parity.
struct Substitution {
    random: Vec<usize>,
    nearest: Vec<bool>,
}

/// For every id, the nearest codebook entry with the other parity.
fn nearest_opposite(entries: &Tensor) -> Vec<usize> {
    let k = entries.rows();
    let dist = |a: usize, b: usize| entries.row(a).iter().zip(entries.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    (0..k)
        .map(|a| {
            (0..k)
                .filter(|b| b % 2 != a % 2)
                .min_by(|&b, &c| dist(a, b).total_cmp(&dist(a, c)).then(b.cmp(&c)))
                .unwrap_or(a)
        })
        .collect()
}

/// Forward and backward pass for one clip.
fn clip_step(
    models: &WatermarkModels,
    sim: &AttackSimulator,
    mr: &MultiResolutionStft,
    clip: &Waveform,
    mask: &FrameMask,
    attack: &DistortionSpec,
    substitute: Option<&Substitution>,
    opposite: &[usize],
    lambda_res: f64,
    lambda_adv: f64,
) -> Result<ClipOutcome> {
    let spec = models.analyze(clip)?;
    let targets = mr.targets(clip.samples())?;
    let mut g = Graph::new();
    let mag = g.constant(spec.magnitude.clone());
    let latents = models.encode_graph(&mut g, mag)?;
    let cb = g.param(&models.params, CODEBOOK);
    let q = quantize_graph(&mut g, latents, cb)?;
    let (codes, ids) = match substitute {
        Some(sub) => {
            let ids: Vec<usize> = (0..q.ids.len())
                .map(|t| match (mask.flags()[t], sub.nearest[t]) {
                    (false, _) => q.ids[t],
                    (true, true) => opposite[q.ids[t]],
                    (true, false) => sub.random[t],
                })
                .collect();
            let w = mask.weights();
            let keep: Vec<f64> = w.iter().map(|v| 1.0 - v).collect();
            let w = g.constant(Tensor::vector(w));
            let keep = g.constant(Tensor::vector(keep));
            let swapped = g.gather_rows(cb, &ids);
            let swapped = g.mul_rows(swapped, w);
            let kept = g.mul_rows(q.quantized, keep);
            (g.add(swapped, kept), ids)
        }
        None => (q.quantized, q.ids.clone()),
    };
    let dec = models.decode_graph(&mut g, codes, &ids, mag, mask)?;
    let wave = istft_fixed_phase(&mut g, models.engine(), dec, &spec.phase, clip.len());
    let rec = mr.loss(&mut g, wave, &targets)?;
    // Substituted frames have no reference audio.
    let rec_weight = if substitute.is_some() { 0.0 } else { 1.0 };
    let rec_term = g.scale(rec, rec_weight);
    let attacked = sim.apply_graph(&mut g, wave, clip.sample_rate(), attack)?;
    let heard = stft_magnitude(&mut g, models.engine(), attacked, ANALYSIS_EPS);

    let loc_logits = models.localizer_graph(&mut g, heard)?;
    let loc = localizer_loss(&mut g, loc_logits, mask);
    let res_logits = models.restorer_graph(&mut g, heard)?;
    let res = restorer_loss(&mut g, res_logits, &ids, mask);

    let terms = vq_loss(&mut g, rec_term, &q, models.config.commitment, None, lambda_adv);
    let weighted_res = g.scale(res, lambda_res);
    let total = g.add(loc, weighted_res);
    let total = g.add(total, terms.total);

    let value = |v| g.value(v).item();
    let losses = [value(loc), value(res), value(rec_term), value(terms.codebook), value(terms.commitment), value(total)];
    let latents_value = g.value(latents).clone();
    let grads = g.backward(total).params();
    Ok(ClipOutcome { grads, losses, latents: latents_value, ids: q.ids })
}

/// Codebook rows from encoder outputs and decoder output bias from the mean log spectrum.
fn data_init(models: &mut WatermarkModels, clips: &[Waveform], rng: &mut impl Rng) -> Result<()> {
    let bins = models.config.bins();
    let mut latents = Vec::new();
    let mut log_mean = vec![0.0; bins];
    let mut frames = 0usize;
    for clip in clips {
        let spec = models.analyze(clip)?;
        let z = models.encode(&spec.magnitude)?;
        latents.extend((0..z.rows()).map(|t| z.row(t).to_vec()));
        for t in 0..spec.magnitude.rows() {
            for (m, &v) in log_mean.iter_mut().zip(spec.magnitude.row(t)) {
                *m += (v + FEATURE_FLOOR).ln();
            }
        }
        frames += spec.magnitude.rows();
    }
    log_mean.iter_mut().for_each(|m| *m /= frames.max(1) as f64);
    let (k, d) = (models.config.codebook_size, models.config.code_dim);
    let mut entries = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row = &latents[rng.gen_range(0..latents.len())];
        entries.extend(row.iter().map(|v| v + rng.gen_range(-1e-2..1e-2)));
    }
    models.params.insert(CODEBOOK, Tensor::matrix(k, d, entries));
    models.params.insert("decoder.out.b", Tensor::vector(log_mean));
    let threshold = 1.0;
    models.codebook_usage = vec![threshold; k];
    Ok(())
}

/// Stage 1: `L = L_loc + λ_res·L_res + L_VQ`, with every example passed through a random distortion.
pub fn train_stage1(
    models: &mut WatermarkModels,
    clips: &[Waveform],
    cfg: &TrainConfig,
    sim: &AttackSimulator,
    log: &mut TrainLog,
) -> Result<Stage1Report> {
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let s1 = &cfg.stage1;
    if s1.adversarial {
        return Err(Error::Config("adversarial training needs a discriminator, which this trainer does not provide".into()));
    }
    let mut skipped = Vec::new();
    let catalog: Vec<DistortionKind> = s1
        .catalog
        .iter()
        .copied()
        .filter(|&k| {
            let ok = k != DistortionKind::MP3 || sim.mp3_available();
            if !ok {
                skipped.push(k);
            }
            ok
        })
        .collect();
    if !skipped.is_empty() {
        log.note("mp3 backend unavailable; MP3 removed from the stage-1 catalog")?;
    }
    if catalog.is_empty() {
        return Err(Error::Config("no usable distortion left in the catalog".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seg_len = (s1.clip_seconds * models.config.sample_rate as f64).round() as usize;
    let mr = MultiResolutionStft::standard();

    if models.state.stage1_steps == 0 {
        let first: Vec<Waveform> = (0..s1.batch_size)
            .map(|_| random_segment(&clips[rng.gen_range(0..clips.len())], seg_len, &mut rng))
            .collect::<Result<_>>()?;
        data_init(models, &first, &mut rng)?;
    }

    let mut adam = Adam::new(cfg.adam);
    let mut revived_total = 0;
    let mut final_total = f64::NAN;
    for step in 1..=s1.steps {
        let lr = s1.schedule.lr(step);
        let lambda_res = s1.lambda_res_at(step);
        let mut grads = BTreeMap::new();
        let mut sums = [0.0; 6];
        let mut gammas = Vec::with_capacity(s1.batch_size);
        let mut kinds = Vec::with_capacity(s1.batch_size);
        let mut recent = Vec::new();
        let mut all_ids = Vec::new();
        let opposite = nearest_opposite(models.params.get(CODEBOOK).expect("codebook"));
        for _ in 0..s1.batch_size {
            let clip = random_segment(&clips[rng.gen_range(0..clips.len())], seg_len, &mut rng)?;
            let gamma = rng.gen_range(s1.gamma_min..=s1.gamma_max);
            let frames = models.config.stft.frames(clip.len());
            let mask = sample_mask(frames, gamma, rng.gen())?;
            let attack = draw_spec(&catalog, rng.gen())?;
            let substitute = rng.gen_bool(s1.substitute_prob).then(|| Substitution {
                random: (0..frames).map(|_| rng.gen_range(0..models.config.codebook_size)).collect(),
                nearest: (0..frames).map(|_| rng.gen_bool(s1.nearest_substitute_prob)).collect(),
            });
            let out =
                clip_step(models, sim, &mr, &clip, &mask, &attack, substitute.as_ref(), &opposite, lambda_res, s1.lambda_adv)?;
            accumulate_grads(&mut grads, out.grads);
            sums.iter_mut().zip(out.losses).for_each(|(s, l)| *s += l);
            gammas.push(gamma);
            kinds.push(attack.kind.name().to_string());
            recent.extend_from_slice(out.latents.data());
            all_ids.extend(out.ids);
        }
        let b = s1.batch_size as f64;
        sums.iter_mut().for_each(|s| *s /= b);
        scale_grads(&mut grads, 1.0 / b);
        let norm = clip_grads(&mut grads, s1.grad_clip);
        let [loc, res, rec, codebook, commitment, total] = sums;
        if !total.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("total {total}, grad norm {norm}, loc {loc}, res {res}, rec {rec}, codebook {codebook}"),
            });
        }
        adam.step(&mut models.params, &grads, lr);

        let mut codebook_state = Codebook::with_usage(models.params.get(CODEBOOK).expect("codebook").clone(), models.codebook_usage.clone())?;
        codebook_state.record_usage(&all_ids, s1.reinit.decay);
        let mut revived = Vec::new();
        if s1.reinit_every > 0 && step % s1.reinit_every == 0 {
            let d = models.config.code_dim;
            let recent = Tensor::matrix(recent.len() / d, d, recent);
            revived = codebook_state.reinit_dead(&recent, &s1.reinit, &mut rng);
            revived_total += revived.len();
        }
        models.codebook_usage = codebook_state.usage().to_vec();
        models.params.insert(CODEBOOK, codebook_state.entries().clone());
        models.state.stage1_steps += 1;
        final_total = total;

        log.push(StepRecord {
            stage: 1,
            step,
            lr,
            total,
            components: vec![
                ("loc".into(), loc),
                ("res".into(), res),
                ("rec".into(), rec),
                ("codebook".into(), codebook),
                ("commitment".into(), commitment),
            ],
            weights: vec![("res".into(), lambda_res), ("commitment".into(), models.config.commitment)],
            grad_norm: norm,
            mean_gamma: gammas.iter().sum::<f64>() / b,
            gammas,
            distortions: kinds,
            revived_codes: revived,
        })?;
    }
    log.flush()?;
    Ok(Stage1Report { steps: s1.steps, final_total, skipped_distortions: skipped, revived_codes: revived_total })
}
