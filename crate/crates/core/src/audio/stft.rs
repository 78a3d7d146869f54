//! Center-padded STFT / overlap-add iSTFT.
//!
//! Frame `t` is centered on sample `t·hop` of the original signal; the signal
//! is reflect-padded by `n_fft/2` on both sides, and `T = ceil(len / hop)`.
//! The inverse divides by the summed squared window, so any window whose
//! shifted squares never vanish reconstructs exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use autograd::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 400, hop: 80, win_length: 400, window: WindowKind::Hann }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, win_length: usize) -> Result<Self> {
        let cfg = Self { n_fft, hop, win_length, window: WindowKind::Hann };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of frequency bins, `n_fft/2 + 1`.
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.n_fft == 0 || self.win_length == 0 {
            return Err(Error::InvalidStftConfig("sizes must be positive".into()));
        }
        if !self.n_fft.is_multiple_of(2) {
            return Err(Error::InvalidStftConfig(format!("n_fft {} must be even", self.n_fft)));
        }
        if !(self.hop <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::InvalidStftConfig(format!(
                "need hop <= win_length <= n_fft, got {} / {} / {}",
                self.hop, self.win_length, self.n_fft
            )));
        }
        let w = self.window_samples();
        for phase in 0..self.hop {
            let env: f64 = (phase..self.n_fft).step_by(self.hop).map(|i| w[i] * w[i]).sum();
            if env < 1e-6 {
                return Err(Error::InvalidStftConfig(format!(
                    "window does not overlap-add to a nonzero envelope at hop {}",
                    self.hop
                )));
            }
        }
        Ok(())
    }

    /// Periodic window of `win_length`, centered inside an `n_fft` frame.
    pub fn window_samples(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win_length) / 2;
        for i in 0..self.win_length {
            w[off + i] = match self.window {
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / self.win_length as f64).cos(),
            };
        }
        w
    }
}

/// Magnitude and phase frames, each `T × F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Tensor,
    pub phase: Tensor,
    pub config: StftConfig,
    /// Length of the analyzed signal, needed to undo the center padding.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitude.rows()
    }

    pub fn bins(&self) -> usize {
        self.magnitude.cols()
    }

    /// Same phase and length, new magnitude.
    pub fn with_magnitude(&self, magnitude: Tensor) -> Result<Self> {
        if magnitude.shape() != self.magnitude.shape() {
            return Err(Error::ShapeMismatch(format!(
                "magnitude {:?} vs phase {:?}",
                magnitude.shape(),
                self.phase.shape()
            )));
        }
        Ok(Self { magnitude, ..self.clone() })
    }
}

/// Precomputed window and FFT plans for one configuration.
#[derive(Clone)]
pub struct StftEngine {
    cfg: StftConfig,
    window: Arc<Vec<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine").field("cfg", &self.cfg).finish()
    }
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: Arc::new(cfg.window_samples()),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn pad(&self) -> usize {
        self.cfg.n_fft / 2
    }

    /// Shortest signal this engine accepts.
    pub fn min_len(&self) -> usize {
        self.cfg.win_length.max(self.pad() + 1)
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len < self.min_len() {
            return Err(Error::SignalTooShort { len, min: self.min_len() });
        }
        Ok(())
    }

    /// Reflect-padded copy of `x` (no edge repeat).
    pub(crate) fn reflect_pad(&self, x: &[f64]) -> Vec<f64> {
        let p = self.pad();
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * p);
        for i in 0..p {
            out.push(x[p - i]);
        }
        out.extend_from_slice(x);
        for i in 0..p {
            out.push(x[n - 2 - i]);
        }
        out
    }

    /// Adjoint of [`Self::reflect_pad`].
    pub(crate) fn reflect_pad_adjoint(&self, g: &[f64], n: usize) -> Vec<f64> {
        let p = self.pad();
        let mut out = g[p..p + n].to_vec();
        for i in 0..p {
            out[p - i] += g[i];
            out[n - 2 - i] += g[p + n + i];
        }
        out
    }

    /// Complex one-sided spectra of every frame, `T` rows of `F` bins.
    pub(crate) fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let (n_fft, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        let padded = self.reflect_pad(x);
        let frames = self.cfg.frames(x.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        (0..frames)
            .map(|t| {
                let seg = &padded[t * hop..t * hop + n_fft];
                for i in 0..n_fft {
                    buf[i] = Complex64::new(seg[i] * self.window[i], 0.0);
                }
                self.fwd.process_with_scratch(&mut buf, &mut scratch);
                buf[..bins].to_vec()
            })
            .collect()
    }

    /// Real part of the unnormalized inverse DFT of a one-sided spectrum
    /// extended with Hermitian symmetry.
    pub(crate) fn hermitian_inverse(&self, half: &[Complex64], out: &mut [f64], scratch: &mut Vec<Complex64>) {
        let n = self.cfg.n_fft;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n.div_ceil(2) {
            buf[n - k] = half[k].conj();
        }
        scratch.resize(self.inv.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        self.inv.process_with_scratch(&mut buf, scratch);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }

    /// Real part of the unnormalized inverse DFT of `half` zero-extended to `n_fft`.
    pub(crate) fn one_sided_inverse(&self, half: &[Complex64], out: &mut [f64], scratch: &mut Vec<Complex64>) {
        let n = self.cfg.n_fft;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..half.len()].copy_from_slice(half);
        scratch.resize(self.inv.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        self.inv.process_with_scratch(&mut buf, scratch);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }

    pub(crate) fn forward_fft(&self, frame: &[f64], scratch: &mut Vec<Complex64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        scratch.resize(self.fwd.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        self.fwd.process_with_scratch(&mut buf, scratch);
        buf
    }

    /// Summed squared window over the padded signal of `frames` frames.
    pub(crate) fn envelope(&self, frames: usize) -> Vec<f64> {
        let (n_fft, hop) = (self.cfg.n_fft, self.cfg.hop);
        let mut env = vec![0.0; (frames.max(1) - 1) * hop + n_fft];
        for t in 0..frames {
            for i in 0..n_fft {
                env[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        env
    }

    pub fn stft(&self, wave: &Waveform) -> Result<Spectrogram> {
        self.check_len(wave.len())?;
        let spectra = self.analyze(wave.samples());
        let (t, f) = (spectra.len(), self.cfg.bins());
        let mut magnitude = Tensor::zeros(&[t, f]);
        let mut phase = Tensor::zeros(&[t, f]);
        for (r, frame) in spectra.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                magnitude.row_mut(r)[k] = c.norm();
                phase.row_mut(r)[k] = c.im.atan2(c.re);
            }
        }
        Ok(Spectrogram { magnitude, phase, config: self.cfg, num_samples: wave.len() })
    }

    /// Overlap-add synthesis of `magnitude·e^{i·phase}` frames into `num_samples` samples.
    pub fn istft_raw(&self, magnitude: &Tensor, phase: &Tensor, num_samples: usize) -> Result<Vec<f64>> {
        let (n_fft, hop, bins) = (self.cfg.n_fft, self.cfg.hop, self.cfg.bins());
        if magnitude.shape() != phase.shape() || magnitude.shape().len() != 2 || magnitude.cols() != bins {
            return Err(Error::ShapeMismatch(format!(
                "magnitude {:?} / phase {:?}, expected T x {bins}",
                magnitude.shape(),
                phase.shape()
            )));
        }
        let frames = magnitude.rows();
        if frames != self.cfg.frames(num_samples) {
            return Err(Error::ShapeMismatch(format!(
                "{frames} frames cannot describe {num_samples} samples at hop {hop}"
            )));
        }
        let mut acc = vec![0.0; (frames.max(1) - 1) * hop + n_fft];
        let mut frame = vec![0.0; n_fft];
        let mut half = vec![Complex64::new(0.0, 0.0); bins];
        let mut scratch = Vec::new();
        let norm = 1.0 / n_fft as f64;
        for t in 0..frames {
            for k in 0..bins {
                half[k] = Complex64::from_polar(magnitude.row(t)[k], phase.row(t)[k]);
            }
            self.hermitian_inverse(&half, &mut frame, &mut scratch);
            for i in 0..n_fft {
                acc[t * hop + i] += frame[i] * norm * self.window[i];
            }
        }
        let env = self.envelope(frames);
        let p = self.pad();
        Ok((0..num_samples)
            .map(|j| {
                let e = env[j + p];
                if e > 1e-10 {
                    acc[j + p] / e
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn istft(&self, spec: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
        if spec.config != self.cfg {
            return Err(Error::ShapeMismatch("spectrogram was computed with a different STFT config".into()));
        }
        let samples = self.istft_raw(&spec.magnitude, &spec.phase, spec.num_samples)?;
        Waveform::new(samples, sample_rate)
    }
}

/// Forward transform with a throwaway engine.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    StftEngine::new(*cfg)?.stft(wave)
}

/// Inverse transform with a throwaway engine.
pub fn istft(spec: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
    StftEngine::new(spec.config)?.istft(spec, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::snr_db;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 24_000).unwrap()
    }

    #[test]
    fn zero_signal_gives_zero_magnitude_and_300_frames() {
        let w = Waveform::new(vec![0.0; 24_000], 24_000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!(s.frames(), 300);
        assert_eq!(s.bins(), 201);
        assert!(s.magnitude.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        // Bin 20 of a 400-point DFT at 24 kHz sits at 1200 Hz.
        let f0 = 20.0 * 24_000.0 / 400.0;
        let x: Vec<f64> = (0..4800).map(|n| 0.5 * (2.0 * PI * f0 * n as f64 / 24_000.0).sin()).collect();
        let w = Waveform::new(x.clone(), 24_000).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let win = cfg.window_samples();
        // Direct DFT of one interior window as the reference.
        let t = 30;
        let start = t * cfg.hop - cfg.n_fft / 2;
        let direct: Vec<f64> = (0..cfg.bins())
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..cfg.n_fft {
                    let a = -2.0 * PI * (k * n) as f64 / cfg.n_fft as f64;
                    re += x[start + n] * win[n] * a.cos();
                    im += x[start + n] * win[n] * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        for k in 0..cfg.bins() {
            assert!((s.magnitude.row(t)[k] - direct[k]).abs() < 1e-9);
        }
        for r in 2..s.frames() - 3 {
            let row = s.magnitude.row(r);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, 20, "frame {r}");
        }
    }

    #[test]
    fn roundtrip_is_near_exact() {
        let cfg = StftConfig::default();
        for (len, seed) in [(400, 1), (24_000, 2), (12_345, 3)] {
            let w = noise(len, seed);
            let s = stft(&w, &cfg).unwrap();
            let back = istft(&s, 24_000).unwrap();
            assert!(snr_db(w.samples(), back.samples()) > 100.0);
        }
    }

    #[test]
    fn zero_magnitude_synthesizes_silence() {
        let w = noise(2000, 4);
        let s = stft(&w, &StftConfig::default()).unwrap();
        let zero = s.with_magnitude(Tensor::zeros(s.magnitude.shape())).unwrap();
        let y = istft(&zero, 24_000).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_magnitude_halves_the_waveform() {
        let x: Vec<f64> = (0..4000).map(|n| (n as f64 * 0.05).sin() * 0.8).collect();
        let w = Waveform::new(x.clone(), 24_000).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        let half = s.with_magnitude(s.magnitude.map(|m| 0.5 * m)).unwrap();
        let y = istft(&half, 24_000).unwrap();
        for (a, b) in y.samples().iter().zip(&x) {
            assert!((a - 0.5 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn short_signal_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 24_000).unwrap();
        assert!(matches!(stft(&w, &StftConfig::default()), Err(Error::SignalTooShort { .. })));
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(StftConfig::new(400, 500, 400).is_err());
        assert!(StftConfig::new(400, 80, 512).is_err());
        assert!(StftConfig::new(401, 80, 400).is_err());
        assert!(StftConfig::new(400, 400, 400).is_err(), "Hann at hop == win has a zero envelope");
    }

    #[test]
    fn istft_rejects_inconsistent_shapes() {
        let e = StftEngine::new(StftConfig::default()).unwrap();
        let m = Tensor::zeros(&[10, 201]);
        let p = Tensor::zeros(&[10, 200]);
        assert!(e.istft_raw(&m, &p, 800).is_err());
        assert!(e.istft_raw(&m, &m, 2000).is_err());
    }
}
