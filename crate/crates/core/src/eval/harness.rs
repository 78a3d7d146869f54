use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackSimulator, DistortionKind, DistortionSpec};
use crate::audio::Waveform;
use crate::codec::{detect, embed, AlignmentPolicy, Placement, Selection, WatermarkPlan};
use crate::error::{Error, Result};
use crate::models::WatermarkModels;
use crate::stats::{DetectionVerdict, DEFAULT_Z_THRESHOLD};

use super::metrics::{ber, bps, rtf, snr_db, RunningMean};

/// Output of an embedding, as seen by the harness.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub watermarked: Waveform,
    pub plan: WatermarkPlan,
}

#[derive(Clone, Debug)]
pub struct Extracted {
    /// Bits in frame order; exactly the expected count when one was given.
    pub bits: Vec<u8>,
    pub policy: AlignmentPolicy,
    pub verdict: Option<DetectionVerdict>,
}

/// The system under evaluation.
pub trait Watermarker {
    fn embed(&self, wave: &Waveform, bits: &[u8], seed: u64) -> Result<Embedded>;
    fn extract(&self, wave: &Waveform, expected: Option<usize>) -> Result<Extracted>;
    /// Token frames in `wave`.
    fn frames(&self, wave: &Waveform) -> usize;
}

/// Trained models with a fixed token selection strategy.
pub struct ModelWatermarker<'a> {
    pub models: &'a WatermarkModels,
    pub selection: Selection,
}

impl<'a> ModelWatermarker<'a> {
    pub fn new(models: &'a WatermarkModels, selection: Selection) -> Result<Self> {
        models.require_stage1()?;
        if matches!(selection, Selection::Manipulator { .. }) {
            models.require_stage2()?;
        }
        Ok(Self { models, selection })
    }
}

impl Watermarker for ModelWatermarker<'_> {
    fn embed(&self, wave: &Waveform, bits: &[u8], seed: u64) -> Result<Embedded> {
        let out = embed(self.models, wave, bits, &Placement::Random { seed }, self.selection)?;
        Ok(Embedded { watermarked: out.watermarked, plan: out.plan })
    }

    fn extract(&self, wave: &Waveform, expected: Option<usize>) -> Result<Extracted> {
        let r = detect(self.models, wave, expected)?;
        Ok(Extracted { bits: r.bits, policy: r.alignment.policy, verdict: r.verdict })
    }

    fn frames(&self, wave: &Waveform) -> usize {
        self.models.config.stft.frames(wave.len())
    }
}

/// Slot for externally computed perceptual scores such as PESQ.
pub trait QualityMetric {
    fn name(&self) -> &str;
    fn score(&self, reference: &Waveform, test: &Waveform) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub distortion: String,
    /// `None` when the distortion could not run (e.g. no MP3 codec).
    pub ber: Option<f64>,
    pub bits: usize,
    /// Segments where the localizer count differed from the payload length and
    /// the top-score alignment was used.
    pub realigned: usize,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub mean_z: f64,
    pub tpr: f64,
    pub mean_snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRates {
    pub threshold: f64,
    pub ratio: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub watermarked: usize,
    pub clean: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub utterances: usize,
    pub ber_table: Vec<BerRow>,
    pub snr_db: Option<f64>,
    pub bps: Option<f64>,
    /// Embed plus detect wall time over audio duration.
    pub rtf: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    pub detection: Option<UtteranceRates>,
    pub alignment_policy: String,
    /// Scores from [`QualityMetric`] hooks, averaged over segments.
    pub external: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn mean_ber(&self) -> Option<f64> {
        let v: Vec<f64> = self.ber_table.iter().filter_map(|r| r.ber).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

const ALIGNMENT_NOTE: &str =
    "when the localizer count differs from the payload length, bits are read at the top-scoring frames";

#[derive(Clone, Debug, PartialEq)]
pub struct HidingOptions {
    pub segment_seconds: f64,
    pub capacity_bps: usize,
    pub catalog: Vec<DistortionKind>,
    pub seed: u64,
}

impl Default for HidingOptions {
    fn default() -> Self {
        Self { segment_seconds: 1.0, capacity_bps: 32, catalog: DistortionKind::ALL.to_vec(), seed: 0 }
    }
}

/// Segment protocol: a random segment of each utterance carries a random payload,
/// every catalog distortion is applied to the watermarked segment, and bits are
/// read back with the payload length known.
pub fn run_information_hiding_eval(
    system: &dyn Watermarker,
    sim: &AttackSimulator,
    corpus: &[Waveform],
    opts: &HidingOptions,
    quality: &[&dyn QualityMetric],
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if opts.catalog.is_empty() {
        return Err(Error::InvalidArgument("distortion catalog is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut errors: Vec<(usize, usize, usize, Option<String>)> = vec![(0, 0, 0, None); opts.catalog.len()];
    let (mut snr, mut wall, mut audio_secs, mut payload) = (RunningMean::default(), 0.0, 0.0, 0usize);
    let mut external: BTreeMap<String, RunningMean> = BTreeMap::new();
    let mut used = 0;
    for clip in corpus {
        let len = (opts.segment_seconds * clip.sample_rate() as f64).round() as usize;
        if clip.len() < len || len == 0 {
            continue;
        }
        let start = rng.gen_range(0..=clip.len() - len);
        let seg = clip.segment(start, len)?;
        let l = ((opts.capacity_bps as f64 * seg.duration_secs()).round() as usize).max(1);
        let bits: Vec<u8> = (0..l).map(|_| rng.gen_range(0..2)).collect();
        let t0 = Instant::now();
        let marked = system.embed(&seg, &bits, rng.gen())?;
        let embed_secs = t0.elapsed().as_secs_f64();
        snr.push(snr_db(seg.samples(), marked.watermarked.samples()));
        for q in quality {
            external.entry(q.name().to_string()).or_default().push(q.score(&seg, &marked.watermarked)?);
        }
        for (row, &kind) in errors.iter_mut().zip(&opts.catalog) {
            let spec = DistortionSpec::sample(kind, &mut rng);
            let attacked = match sim.apply(&marked.watermarked, &spec) {
                Ok(w) => w,
                Err(Error::CodecUnavailable(msg)) => {
                    row.3 = Some(msg);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let t1 = Instant::now();
            let got = system.extract(&attacked, Some(l))?;
            if kind == DistortionKind::NONE {
                wall += embed_secs + t1.elapsed().as_secs_f64();
                audio_secs += seg.duration_secs();
            }
            row.0 += (ber(&bits, &got.bits)? * l as f64).round() as usize;
            row.1 += l;
            row.2 += (got.policy == AlignmentPolicy::TopScores) as usize;
        }
        payload += l;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!("no clip is at least {} s long", opts.segment_seconds)));
    }
    let ber_table = errors
        .into_iter()
        .zip(&opts.catalog)
        .map(|((e, n, realigned, skipped), kind)| BerRow {
            distortion: kind.name().to_string(),
            ber: (n > 0).then(|| e as f64 / n as f64),
            bits: n,
            realigned,
            skipped,
        })
        .collect();
    let total_secs = used as f64 * opts.segment_seconds;
    Ok(EvalReport {
        mode: "information-hiding".into(),
        utterances: used,
        ber_table,
        snr_db: Some(snr.mean()),
        bps: Some(bps(payload, total_secs)),
        rtf: (audio_secs > 0.0).then(|| rtf(wall, audio_secs)),
        sweep: Vec::new(),
        detection: None,
        alignment_policy: ALIGNMENT_NOTE.into(),
        external: external.into_iter().map(|(k, v)| (k, v.mean())).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOptions {
    /// Watermark ratios of the sweep.
    pub ratios: Vec<f64>,
    /// Ratio at which utterance TPR is reported; must be one of `ratios`.
    pub ratio: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self { ratios: vec![0.02, 0.05, 0.1, 0.2, 0.3, 0.5], ratio: 0.1, threshold: DEFAULT_Z_THRESHOLD, seed: 0 }
    }
}

fn decision_z(got: &Extracted) -> Result<f64> {
    got.verdict
        .as_ref()
        .map(|v| v.z)
        .ok_or_else(|| Error::MissingPrerequisite("detector calibration required for the Z-test".into()))
}

/// Utterance protocol: whole utterances are watermarked at each sweep ratio and
/// decided by the Z-test; the clean utterances give the false-positive rate.
pub fn run_ai_detection_eval(system: &dyn Watermarker, corpus: &[Waveform], opts: &DetectionOptions) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !opts.ratios.contains(&opts.ratio) {
        return Err(Error::InvalidArgument(format!("reporting ratio {} is not in the sweep", opts.ratio)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut false_alarms = 0;
    for clip in corpus {
        let got = system.extract(clip, None)?;
        if verdict_with(&got, opts.threshold)? {
            false_alarms += 1;
        }
    }
    let mut sweep = Vec::with_capacity(opts.ratios.len());
    let mut detection = None;
    for &ratio in &opts.ratios {
        let (mut z, mut snr, mut hits) = (RunningMean::default(), RunningMean::default(), 0);
        for clip in corpus {
            let frames = system.frames(clip);
            let l = ((ratio * frames as f64).round() as usize).max(1);
            let bits: Vec<u8> = (0..l).map(|_| rng.gen_range(0..2)).collect();
            let marked = system.embed(clip, &bits, rng.gen())?;
            let got = system.extract(&marked.watermarked, None)?;
            z.push(decision_z(&got)?);
            hits += verdict_with(&got, opts.threshold)? as usize;
            snr.push(snr_db(clip.samples(), marked.watermarked.samples()));
        }
        let tpr = hits as f64 / corpus.len() as f64;
        if ratio == opts.ratio {
            detection = Some(UtteranceRates {
                threshold: opts.threshold,
                ratio,
                tpr,
                fpr: false_alarms as f64 / corpus.len() as f64,
                watermarked: corpus.len(),
                clean: corpus.len(),
            });
        }
        sweep.push(SweepPoint { ratio, mean_z: z.mean(), tpr, mean_snr_db: snr.mean() });
    }
    Ok(EvalReport {
        mode: "ai-detection".into(),
        utterances: corpus.len(),
        sweep,
        detection,
        alignment_policy: ALIGNMENT_NOTE.into(),
        ..EvalReport::default()
    })
}

fn verdict_with(got: &Extracted, threshold: f64) -> Result<bool> {
    Ok(decision_z(got)? > threshold)
}
