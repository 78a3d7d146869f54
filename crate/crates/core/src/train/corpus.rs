//! Training audio: WAV folders or a synthetic speech-like generator.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};

/// Parameters of the synthetic generator: sequences of voiced and unvoiced
/// segments, each a harmonic or noise excitation shaped by three formant resonators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeech {
    pub sample_rate: u32,
    pub seconds: f64,
    pub clips: usize,
    pub seed: u64,
}

impl Default for SyntheticSpeech {
    fn default() -> Self {
        Self { sample_rate: 24_000, seconds: 2.0, clips: 32, seed: 0 }
    }
}

/// Two-pole resonator with unity gain at its center frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Self {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        let a1 = -2.0 * r * theta.cos();
        let a2 = r * r;
        let z = rustfft::num_complex::Complex::from_polar(1.0, -theta);
        let gain = (1.0 + a1 * z + a2 * z * z).norm();
        Self { a1, a2, gain, y1: 0.0, y2: 0.0 }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.gain * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

impl SyntheticSpeech {
    pub fn clip(&self, rng: &mut impl Rng) -> Waveform {
        let sr = self.sample_rate as f64;
        let n = (self.seconds * sr).round().max(1.0) as usize;
        let mut out = Vec::with_capacity(n);
        let speaker_f0 = rng.gen_range(90.0..220.0);
        let mut phase = 0.0;
        while out.len() < n {
            let len = ((rng.gen_range(0.08..0.25) * sr) as usize).min(n - out.len());
            let kind = rng.gen_range(0..10);
            let formants = [rng.gen_range(300.0..900.0), rng.gen_range(900.0..2400.0), rng.gen_range(2400.0..3600.0)];
            let mut res: Vec<Resonator> =
                formants.iter().zip([80.0, 120.0, 180.0]).map(|(&f, b)| Resonator::new(f, b, sr)).collect();
            let f_start = speaker_f0 * rng.gen_range(0.85..1.15);
            let f_end = speaker_f0 * rng.gen_range(0.85..1.15);
            let level = rng.gen_range(0.15..0.45);
            for i in 0..len {
                let u = i as f64 / len as f64;
                let env = (u * 8.0).min(1.0) * ((1.0 - u) * 6.0).min(1.0);
                let excitation = match kind {
                    // Pause.
                    0 => 0.0,
                    // Unvoiced.
                    1 | 2 => 0.3 * Distribution::<f64>::sample(&StandardNormal, rng),
                    _ => {
                        let f0 = f_start + (f_end - f_start) * u;
                        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                        let harmonics = ((sr / 2.0 * 0.9) / f0).floor() as usize;
                        (1..=harmonics.min(40)).map(|h| (h as f64 * phase).sin() / (h as f64).sqrt()).sum::<f64>() * 0.15
                    }
                };
                let mut y = 0.0;
                for r in res.iter_mut() {
                    y += r.process(excitation);
                }
                out.push(level * env * y / 3.0);
            }
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.9 {
            out.iter_mut().for_each(|v| *v *= 0.9 / peak);
        }
        Waveform::new(out, self.sample_rate).expect("finite synthetic samples")
    }

    pub fn generate(&self) -> Vec<Waveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.clips).map(|_| self.clip(&mut rng)).collect()
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Every `.wav` under `dir`, sorted by path. With `resample`, clips at other
/// rates are converted to `sample_rate`; otherwise they are rejected.
pub fn load_corpus(dir: impl AsRef<Path>, sample_rate: u32, resample: bool) -> Result<Vec<Waveform>> {
    let mut paths = Vec::new();
    collect_wavs(dir.as_ref(), &mut paths)?;
    paths.sort();
    let mut clips = Vec::with_capacity(paths.len());
    for p in paths {
        let w = read_wav(&p, resample.then_some(sample_rate))?;
        if w.sample_rate() != sample_rate {
            return Err(Error::InvalidWaveform(format!("{} is at {} Hz, expected {sample_rate}", p.display(), w.sample_rate())));
        }
        clips.push(w);
    }
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(clips)
}
