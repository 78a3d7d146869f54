//! Distortion catalog applied to watermarked speech during training and evaluation.

use std::fmt;
use std::path::PathBuf;
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use autograd::{Graph, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, write_wav, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum DistortionKind {
    /// Additive Gaussian noise.
    GN,
    /// Amplitude scaling.
    AS,
    /// Resampling there and back.
    RS,
    /// MP3 round trip through an external codec.
    MP3,
    /// Median filter.
    MF,
    /// Low-pass filter.
    LP,
    /// Echo addition.
    EA,
    /// Sample quantization.
    QTZ,
    /// Sample suppression.
    SS,
    /// Pink noise.
    PN,
    NONE,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 11] = [
        Self::GN,
        Self::AS,
        Self::RS,
        Self::MP3,
        Self::MF,
        Self::LP,
        Self::EA,
        Self::QTZ,
        Self::SS,
        Self::PN,
        Self::NONE,
    ];

    /// The ten attacks used for robustness evaluation.
    pub const ATTACKS: [DistortionKind; 10] =
        [Self::GN, Self::AS, Self::RS, Self::MP3, Self::MF, Self::LP, Self::EA, Self::QTZ, Self::SS, Self::PN];

    pub fn name(self) -> &'static str {
        match self {
            Self::GN => "GN",
            Self::AS => "AS",
            Self::RS => "RS",
            Self::MP3 => "MP3",
            Self::MF => "MF",
            Self::LP => "LP",
            Self::EA => "EA",
            Self::QTZ => "QTZ",
            Self::SS => "SS",
            Self::PN => "PN",
            Self::NONE => "NONE",
        }
    }

    /// Whether gradients flow through this distortion inside the training graph.
    pub fn differentiable(self) -> bool {
        !matches!(self, Self::RS | Self::MP3)
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion kind {s:?}")))
    }
}

/// Kind-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DistortionParams {
    None,
    GaussianNoise { snr_db: f64 },
    Amplitude { gain: f64 },
    Resample { factor: f64 },
    Mp3 { bitrate_kbps: u32 },
    MedianFilter { kernel: usize },
    LowPass { cutoff_hz: f64, order: usize },
    Echo { attenuation: f64, delay_ms: f64 },
    Quantize { levels: usize },
    SampleSuppression { fraction: f64 },
    PinkNoise { ratio: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub params: DistortionParams,
    /// Seeds the noise realization or sample choice, where the kind has one.
    pub seed: u64,
}

impl DistortionSpec {
    /// Draws kind-specific parameters from their documented ranges.
    pub fn sample(kind: DistortionKind, rng: &mut impl Rng) -> Self {
        let params = match kind {
            DistortionKind::GN => DistortionParams::GaussianNoise { snr_db: rng.gen_range(20.0..=40.0) },
            DistortionKind::AS => DistortionParams::Amplitude { gain: 0.9 },
            DistortionKind::RS => DistortionParams::Resample { factor: if rng.gen_bool(0.5) { 2.0 } else { 0.5 } },
            DistortionKind::MP3 => DistortionParams::Mp3 { bitrate_kbps: 64 },
            DistortionKind::MF => DistortionParams::MedianFilter { kernel: 3 },
            DistortionKind::LP => DistortionParams::LowPass { cutoff_hz: 5000.0, order: 6 },
            DistortionKind::EA => DistortionParams::Echo {
                attenuation: rng.gen_range(0.1..=0.3),
                delay_ms: rng.gen_range(100.0..=300.0),
            },
            DistortionKind::QTZ => DistortionParams::Quantize { levels: 256 },
            DistortionKind::SS => DistortionParams::SampleSuppression { fraction: 0.001 },
            DistortionKind::PN => DistortionParams::PinkNoise { ratio: 0.1 },
            DistortionKind::NONE => DistortionParams::None,
        };
        Self { kind, params, seed: rng.gen() }
    }

    pub fn none() -> Self {
        Self { kind: DistortionKind::NONE, params: DistortionParams::None, seed: 0 }
    }

    fn check(&self) -> Result<()> {
        let ok = match (self.kind, self.params) {
            (DistortionKind::NONE, DistortionParams::None) => true,
            (DistortionKind::GN, DistortionParams::GaussianNoise { snr_db }) => snr_db.is_finite(),
            (DistortionKind::AS, DistortionParams::Amplitude { gain }) => gain.is_finite(),
            (DistortionKind::RS, DistortionParams::Resample { factor }) => factor > 0.0 && factor.is_finite(),
            (DistortionKind::MP3, DistortionParams::Mp3 { bitrate_kbps }) => bitrate_kbps > 0,
            (DistortionKind::MF, DistortionParams::MedianFilter { kernel }) => kernel % 2 == 1,
            (DistortionKind::LP, DistortionParams::LowPass { cutoff_hz, order }) => {
                cutoff_hz > 0.0 && order >= 2 && order % 2 == 0
            }
            (DistortionKind::EA, DistortionParams::Echo { attenuation, delay_ms }) => {
                attenuation.is_finite() && delay_ms >= 0.0
            }
            (DistortionKind::QTZ, DistortionParams::Quantize { levels }) => levels >= 2,
            (DistortionKind::SS, DistortionParams::SampleSuppression { fraction }) => (0.0..=1.0).contains(&fraction),
            (DistortionKind::PN, DistortionParams::PinkNoise { ratio }) => ratio >= 0.0 && ratio.is_finite(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("parameters {:?} do not fit kind {}", self.params, self.kind)))
        }
    }
}

/// Encodes and decodes PCM through a lossy codec at a given bitrate.
pub trait LossyCodec: Send + Sync {
    /// Returns audio at the input's rate; length may differ.
    fn round_trip(&self, wave: &Waveform, bitrate_kbps: u32) -> Result<Vec<f64>>;
}

/// Runs `ffmpeg` (or another program with the same flags) as a subprocess.
#[derive(Clone, Debug)]
pub struct FfmpegCodec {
    pub program: PathBuf,
}

impl Default for FfmpegCodec {
    fn default() -> Self {
        let program = std::env::var_os("VQMARK_FFMPEG").map(PathBuf::from).unwrap_or_else(|| "ffmpeg".into());
        Self { program }
    }
}

impl FfmpegCodec {
    pub fn available(&self) -> bool {
        Command::new(&self.program).arg("-version").output().map(|o| o.status.success()).unwrap_or(false)
    }

    fn run(&self, args: &[&std::ffi::OsStr]) -> Result<()> {
        let out = Command::new(&self.program)
            .args(["-y", "-hide_banner", "-loglevel", "error"])
            .args(args)
            .output()
            .map_err(|e| Error::CodecUnavailable(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::CodecUnavailable(format!(
                "{} failed: {}",
                self.program.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

struct Scratch(PathBuf);

impl Scratch {
    fn new() -> Result<Self> {
        let id = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("vqmark-codec-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

impl LossyCodec for FfmpegCodec {
    fn round_trip(&self, wave: &Waveform, bitrate_kbps: u32) -> Result<Vec<f64>> {
        if !self.available() {
            return Err(Error::CodecUnavailable(format!("{} not found", self.program.display())));
        }
        let dir = Scratch::new()?;
        let (input, coded, output) = (dir.path("in.wav"), dir.path("coded.mp3"), dir.path("out.wav"));
        write_wav(&input, wave)?;
        let rate = format!("{}k", bitrate_kbps);
        self.run(&[input.as_os_str(), "-b:a".as_ref(), rate.as_ref(), coded.as_os_str()])?;
        let sr = wave.sample_rate().to_string();
        self.run(&[
            "-i".as_ref(),
            coded.as_os_str(),
            "-ac".as_ref(),
            "1".as_ref(),
            "-ar".as_ref(),
            sr.as_ref(),
            "-c:a".as_ref(),
            "pcm_s16le".as_ref(),
            output.as_os_str(),
        ])?;
        Ok(read_wav(&output, None)?.into_samples())
    }
}

/// Applies distortions; holds the optional external codec.
#[derive(Clone)]
pub struct AttackSimulator {
    codec: Option<Arc<dyn LossyCodec>>,
}

impl Default for AttackSimulator {
    fn default() -> Self {
        Self { codec: Some(Arc::new(FfmpegCodec::default())) }
    }
}

impl fmt::Debug for AttackSimulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttackSimulator").field("codec", &self.codec.is_some()).finish()
    }
}

impl AttackSimulator {
    pub fn with_codec(codec: Arc<dyn LossyCodec>) -> Self {
        Self { codec: Some(codec) }
    }

    pub fn without_codec() -> Self {
        Self { codec: None }
    }

    /// Whether MP3 round trips can run right now.
    pub fn mp3_available(&self) -> bool {
        match &self.codec {
            None => false,
            Some(c) => {
                let probe = Waveform::new(vec![0.0; 2400], 24_000).expect("valid probe");
                c.round_trip(&probe, 64).is_ok()
            }
        }
    }

    pub fn apply(&self, wave: &Waveform, spec: &DistortionSpec) -> Result<Waveform> {
        spec.check()?;
        let x = wave.samples();
        let sr = wave.sample_rate();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let y = match spec.params {
            DistortionParams::None => x.to_vec(),
            DistortionParams::GaussianNoise { snr_db } => {
                let std = noise_std(x, snr_db);
                x.iter().map(|v| v + std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
            }
            DistortionParams::Amplitude { gain } => x.iter().map(|v| v * gain).collect(),
            DistortionParams::Resample { factor } => {
                let mid = (sr as f64 * factor).round() as u32;
                fit_length(resample(&resample(x, sr, mid), mid, sr), x.len())
            }
            DistortionParams::Mp3 { bitrate_kbps } => {
                let codec = self
                    .codec
                    .as_ref()
                    .ok_or_else(|| Error::CodecUnavailable("no MP3 codec configured".into()))?;
                fit_length(codec.round_trip(wave, bitrate_kbps)?, x.len())
            }
            DistortionParams::MedianFilter { kernel } => median_filter(x, kernel).0,
            DistortionParams::LowPass { cutoff_hz, order } => {
                ButterworthLowPass::new(cutoff_hz, sr as f64, order)?.filter(x)
            }
            DistortionParams::Echo { attenuation, delay_ms } => {
                let d = echo_delay(delay_ms, sr);
                echo(x, attenuation, d).iter().map(|v| v.clamp(-1.0, 1.0)).collect()
            }
            DistortionParams::Quantize { levels } => x.iter().map(|&v| quantize(v, levels)).collect(),
            DistortionParams::SampleSuppression { fraction } => {
                let mut y = x.to_vec();
                for i in suppressed_indices(x.len(), fraction, &mut rng) {
                    y[i] = 0.0;
                }
                y
            }
            DistortionParams::PinkNoise { ratio } => {
                let noise = pink_noise(x.len(), &mut rng);
                let scale = ratio * rms(x);
                x.iter().zip(noise).map(|(v, n)| v + scale * n).collect()
            }
        };
        Waveform::new(y, sr)
    }

    /// Samples a kind uniformly from `catalog`, draws its parameters and applies it.
    pub fn random_attack(&self, wave: &Waveform, catalog: &[DistortionKind], seed: u64) -> Result<(Waveform, DistortionSpec)> {
        let spec = draw_spec(catalog, seed)?;
        Ok((self.apply(wave, &spec)?, spec))
    }

    /// Distortion as a graph operation on a waveform variable.
    ///
    /// Noise amplitudes are treated as constants, QTZ passes gradients straight
    /// through, and RS/MP3 block gradients.
    pub fn apply_graph(&self, g: &mut Graph, x: Var, sample_rate: u32, spec: &DistortionSpec) -> Result<Var> {
        spec.check()?;
        let xs = g.value(x).data().to_vec();
        let wave = Waveform::new(xs.clone(), sample_rate)?;
        let n = xs.len();
        let out = self.apply(&wave, spec)?.into_samples();
        let value = Tensor::new(g.value(x).shape(), out);
        let backward: autograd::BackwardFn = match spec.params {
            DistortionParams::Resample { .. } | DistortionParams::Mp3 { .. } => return Ok(g.constant(value)),
            DistortionParams::None
            | DistortionParams::GaussianNoise { .. }
            | DistortionParams::PinkNoise { .. }
            | DistortionParams::Quantize { .. } => Box::new(|ctx| vec![Some(ctx.grad.clone())]),
            DistortionParams::Amplitude { gain } => Box::new(move |ctx| {
                let mut gx = ctx.grad.clone();
                gx.scale_in_place(gain);
                vec![Some(gx)]
            }),
            DistortionParams::MedianFilter { kernel } => {
                let src = median_filter(&xs, kernel).1;
                Box::new(move |ctx| {
                    let mut gx = Tensor::zeros(ctx.grad.shape());
                    let gd = gx.data_mut();
                    for (i, &s) in src.iter().enumerate() {
                        if let Some(s) = s {
                            gd[s] += ctx.grad.data()[i];
                        }
                    }
                    vec![Some(gx)]
                })
            }
            DistortionParams::LowPass { cutoff_hz, order } => {
                let f = ButterworthLowPass::new(cutoff_hz, sample_rate as f64, order)?;
                Box::new(move |ctx| {
                    let mut r: Vec<f64> = ctx.grad.data().iter().rev().copied().collect();
                    r = f.filter(&r);
                    r.reverse();
                    vec![Some(Tensor::new(ctx.grad.shape(), r))]
                })
            }
            DistortionParams::Echo { attenuation, delay_ms } => {
                let d = echo_delay(delay_ms, sample_rate);
                let pre = echo(&xs, attenuation, d);
                Box::new(move |ctx| {
                    let gp: Vec<f64> =
                        ctx.grad.data().iter().zip(&pre).map(|(g, p)| if p.abs() <= 1.0 { *g } else { 0.0 }).collect();
                    let gx: Vec<f64> =
                        (0..n).map(|i| gp[i] + if i + d < n { attenuation * gp[i + d] } else { 0.0 }).collect();
                    vec![Some(Tensor::new(ctx.grad.shape(), gx))]
                })
            }
            DistortionParams::SampleSuppression { fraction } => {
                let mut keep = vec![true; n];
                for i in suppressed_indices(n, fraction, &mut ChaCha8Rng::seed_from_u64(spec.seed)) {
                    keep[i] = false;
                }
                Box::new(move |ctx| {
                    let d = ctx.grad.data().iter().zip(&keep).map(|(g, &k)| if k { *g } else { 0.0 }).collect();
                    vec![Some(Tensor::new(ctx.grad.shape(), d))]
                })
            }
        };
        Ok(g.custom(&[x], value, backward))
    }
}

/// Draws a uniformly chosen kind from `catalog` and its parameters.
pub fn draw_spec(catalog: &[DistortionKind], seed: u64) -> Result<DistortionSpec> {
    if catalog.is_empty() {
        return Err(Error::InvalidArgument("empty distortion catalog".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = catalog[rng.gen_range(0..catalog.len())];
    Ok(DistortionSpec::sample(kind, &mut rng))
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn noise_std(x: &[f64], snr_db: f64) -> f64 {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    (p / 10f64.powf(snr_db / 10.0)).sqrt()
}

fn fit_length(mut y: Vec<f64>, n: usize) -> Vec<f64> {
    y.resize(n, 0.0);
    y
}

fn echo_delay(delay_ms: f64, sr: u32) -> usize {
    (delay_ms * sr as f64 / 1000.0).round() as usize
}

/// `x[n] + a·x[n − d]`, before clipping.
fn echo(x: &[f64], a: f64, d: usize) -> Vec<f64> {
    (0..x.len()).map(|i| x[i] + if i >= d { a * x[i - d] } else { 0.0 }).collect()
}

/// Uniform quantizer with `levels` values spanning `[-1, 1]`.
pub fn quantize(v: f64, levels: usize) -> f64 {
    let steps = (levels - 1) as f64;
    let i = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * steps).round();
    i / steps * 2.0 - 1.0
}

/// Exactly `round(fraction·n)` distinct indices.
pub fn suppressed_indices(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    index::sample(rng, n, k).into_vec()
}

/// Median over a centered window with zero padding. Also returns, per output,
/// which input sample was selected (`None` when it was padding).
pub fn median_filter(x: &[f64], kernel: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let half = kernel / 2;
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut src = Vec::with_capacity(n);
    let mut window: Vec<(f64, Option<usize>)> = Vec::with_capacity(kernel);
    for i in 0..n {
        window.clear();
        for j in 0..kernel {
            let idx = i as isize + j as isize - half as isize;
            if idx < 0 || idx as usize >= n {
                window.push((0.0, None));
            } else {
                window.push((x[idx as usize], Some(idx as usize)));
            }
        }
        window.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (v, s) = window[half];
        out.push(v);
        src.push(s);
    }
    (out, src)
}

/// Unit-RMS noise with a `1/f` power spectrum (zero mean).
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> =
        (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut y: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = rms(&y);
    if r > 0.0 {
        y.iter_mut().for_each(|v| *v /= r);
    }
    y
}

/// Cascade of second-order sections realizing a digital Butterworth low-pass
/// (bilinear transform with frequency prewarping).
#[derive(Clone, Debug, PartialEq)]
pub struct ButterworthLowPass {
    sections: Vec<[f64; 5]>,
}

impl ButterworthLowPass {
    pub fn new(cutoff_hz: f64, sample_rate: f64, order: usize) -> Result<Self> {
        if order == 0 || order % 2 == 1 || !(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "low-pass needs an even order and 0 < cutoff < Nyquist, got order {order}, cutoff {cutoff_hz}"
            )));
        }
        let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let sections = (1..=order / 2)
            .map(|k| {
                let theta = std::f64::consts::PI * (2 * k - 1) as f64 / (2 * order) as f64;
                let q = 1.0 / (2.0 * theta.cos());
                let alpha = sin / (2.0 * q);
                let a0 = 1.0 + alpha;
                let b0 = (1.0 - cos) / 2.0 / a0;
                [b0, 2.0 * b0, b0, -2.0 * cos / a0, (1.0 - alpha) / a0]
            })
            .collect();
        Ok(Self { sections })
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &[b0, b1, b2, a1, a2] in &self.sections {
            let (mut s1, mut s2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let input = *v;
                let out = b0 * input + s1;
                s1 = b1 * input - a1 * out + s2;
                s2 = b2 * input - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Magnitude response at normalized angular frequency `w` (radians/sample).
    pub fn magnitude(&self, w: f64) -> f64 {
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|&[b0, b1, b2, a1, a2]| ((b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)).norm())
            .product()
    }
}
