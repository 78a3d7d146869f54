use crate::audio::Waveform;
use crate::codec::{embed_with_plan, EmbedOutput, Selection, WatermarkPlan};
use crate::error::{Error, Result};
use crate::models::WatermarkModels;

use super::metrics::snr_db;

/// Seed of the `i`-th candidate position set. Candidate 0 uses `seed` itself, so
/// best-of-1 is the plain random-placement embed, and the first `n` candidates of
/// a larger `n` are the same sets.
pub fn candidate_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug)]
pub struct BestOfN {
    pub output: EmbedOutput,
    pub snr_db: f64,
    /// SNR of every candidate, in seed order.
    pub candidate_snrs: Vec<f64>,
    pub chosen: usize,
}

/// Embeds with `n` independent random position sets and keeps the one whose
/// watermarked output has the highest SNR against the input (earliest on ties).
pub fn select_positions_best_of_n(
    models: &WatermarkModels,
    wave: &Waveform,
    bits: &[u8],
    n: usize,
    seed: u64,
    selection: Selection,
) -> Result<BestOfN> {
    if n == 0 {
        return Err(Error::InvalidArgument("best-of-n needs n >= 1".into()));
    }
    models.require_stage1()?;
    let spec = models.analyze(wave)?;
    let mut best: Option<(EmbedOutput, f64, usize)> = None;
    let mut candidate_snrs = Vec::with_capacity(n);
    for i in 0..n {
        let plan = WatermarkPlan::random(bits.to_vec(), spec.frames(), candidate_seed(seed, i))?;
        let out = embed_with_plan(models, &spec, plan, selection)?;
        let s = snr_db(wave.samples(), out.watermarked.samples());
        candidate_snrs.push(s);
        if best.as_ref().is_none_or(|b| s > b.1) {
            best = Some((out, s, i));
        }
    }
    let (output, snr_db, chosen) = best.expect("n >= 1");
    Ok(BestOfN { output, snr_db, candidate_snrs, chosen })
}

/// Running maximum of candidate SNRs: entry `n − 1` is the best-of-`n` value.
pub fn best_of_prefixes(candidate_snrs: &[f64]) -> Vec<f64> {
    candidate_snrs
        .iter()
        .scan(f64::NEG_INFINITY, |m, &s| {
            *m = m.max(s);
            Some(*m)
        })
        .collect()
}
