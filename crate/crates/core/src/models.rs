//! The trained networks and their configuration, bundled for embedding and detection.

use autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FrameMask, Spectrogram, StftConfig, StftEngine, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::manipulator::{self, ManipulatorConfig, TokenDistribution};
use crate::stats::DetectorCalibration;
use crate::vq::{log_features, CodeSequence, Codebook, ConvNetConfig, ConvResNet, DEFAULT_COMMITMENT};

pub const CODEBOOK: &str = "vq.codebook";
pub const DEFAULT_LOCALIZER_THRESHOLD: f64 = 0.5;
const INITIAL_LOG_MAGNITUDE: f64 = -3.0;
const CODE_STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub commitment: f64,
    pub encoder: ConvNetConfig,
    /// Shared by the masked decoder, the localizer and the restorer.
    pub decoder: ConvNetConfig,
    pub manipulator: ManipulatorConfig,
    pub localizer_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            stft: StftConfig::default(),
            codebook_size: 128,
            code_dim: 128,
            commitment: DEFAULT_COMMITMENT,
            encoder: ConvNetConfig::encoder_default(),
            decoder: ConvNetConfig::decoder_default(),
            manipulator: ManipulatorConfig::default(),
            localizer_threshold: DEFAULT_LOCALIZER_THRESHOLD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.manipulator.validate()?;
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least one even and one odd id".into()));
        }
        if self.code_dim == 0 || self.sample_rate == 0 {
            return Err(Error::Config("code width and sample rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.localizer_threshold) {
            return Err(Error::Config("localizer threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }

    fn encoder_net(&self) -> ConvResNet {
        ConvResNet::new("encoder", self.bins(), self.code_dim, self.encoder.clone())
    }

    fn decoder_net(&self) -> ConvResNet {
        ConvResNet::new("decoder", self.code_dim + self.bins() + 2, self.bins(), self.decoder.clone())
    }

    fn localizer_net(&self) -> ConvResNet {
        ConvResNet::new("localizer", self.bins(), 1, self.decoder.clone())
    }

    fn restorer_net(&self) -> ConvResNet {
        ConvResNet::new("restorer", self.bins(), 1, self.decoder.clone())
    }
}

/// Completed training, recorded in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

/// Frame-wise probability that a frame was regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerOutput {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub detected: Vec<usize>,
}

/// Frame-wise probability that the token id is odd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerOutput {
    pub parity_probs: Vec<f64>,
}

#[derive(Clone)]
pub struct WatermarkModels {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub codebook_usage: Vec<f64>,
    pub calibration: Option<DetectorCalibration>,
    pub state: TrainingState,
    engine: StftEngine,
}

impl std::fmt::Debug for WatermarkModels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WatermarkModels")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .field("state", &self.state)
            .finish()
    }
}

/// Frame-wise BCE of localizer logits against the mask flags, averaged over all frames.
pub fn localizer_loss(g: &mut Graph, logits: Var, mask: &FrameMask) -> Var {
    let ones = vec![1.0; mask.len()];
    g.bce_with_logits(logits, &mask.weights(), &ones)
}

/// BCE of restorer logits against the parity of `ids`, averaged over masked frames.
pub fn restorer_loss(g: &mut Graph, logits: Var, ids: &[usize], mask: &FrameMask) -> Var {
    let parity: Vec<f64> = ids.iter().map(|&k| (k % 2) as f64).collect();
    g.bce_with_logits(logits, &parity, &mask.weights())
}

fn sigmoid_column(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| autograd::sigmoid_scalar(x)).collect()
}

impl WatermarkModels {
    /// Randomly initialized (untrained) models.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder_net().init(&mut params, 0.0, &mut rng);
        params.init_normal(CODEBOOK, &[config.codebook_size, config.code_dim], 0.1, &mut rng);
        config.decoder_net().init(&mut params, INITIAL_LOG_MAGNITUDE, &mut rng);
        config.localizer_net().init(&mut params, 0.0, &mut rng);
        config.restorer_net().init(&mut params, 0.0, &mut rng);
        manipulator::init_params(&mut params, &config.manipulator, config.codebook_size, &mut rng);
        let usage = vec![0.0; config.codebook_size];
        Self::from_parts(config, params, usage, None, TrainingState::default())
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        codebook_usage: Vec<f64>,
        calibration: Option<DetectorCalibration>,
        state: TrainingState,
    ) -> Result<Self> {
        config.validate()?;
        let engine = StftEngine::new(config.stft)?;
        let cb = params.get(CODEBOOK).ok_or_else(|| Error::CheckpointMismatch(format!("missing {CODEBOOK}")))?;
        if cb.shape() != [config.codebook_size, config.code_dim] || codebook_usage.len() != config.codebook_size {
            return Err(Error::CheckpointMismatch(format!(
                "codebook {:?} does not match K={} d={}",
                cb.shape(),
                config.codebook_size,
                config.code_dim
            )));
        }
        Ok(Self { config, params, codebook_usage, calibration, state, engine })
    }

    pub fn engine(&self) -> &StftEngine {
        &self.engine
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::with_usage(self.params.get(CODEBOOK).expect("checked at construction").clone(), self.codebook_usage.clone())
            .expect("codebook invariant")
    }

    pub fn require_stage1(&self) -> Result<()> {
        if self.state.stage1_steps == 0 {
            return Err(Error::Untrained("autoencoder, localizer and restorer have not been trained".into()));
        }
        Ok(())
    }

    pub fn require_stage2(&self) -> Result<()> {
        if self.state.stage2_steps == 0 {
            return Err(Error::Untrained("manipulator has not been trained".into()));
        }
        Ok(())
    }

    pub fn analyze(&self, wave: &Waveform) -> Result<Spectrogram> {
        if wave.sample_rate() != self.config.sample_rate {
            return Err(Error::InvalidWaveform(format!(
                "sample rate {} differs from the model's {}",
                wave.sample_rate(),
                self.config.sample_rate
            )));
        }
        self.engine.stft(wave)
    }

    fn check_magnitude(&self, mag: &Tensor) -> Result<()> {
        if mag.shape().len() != 2 || mag.cols() != self.config.bins() || mag.rows() == 0 {
            return Err(Error::ShapeMismatch(format!("magnitude {:?}, expected T x {}", mag.shape(), self.config.bins())));
        }
        Ok(())
    }

    /// Pre-quantization latents (`T×d`).
    pub fn encode_graph(&self, g: &mut Graph, magnitude: Var) -> Result<Var> {
        self.check_magnitude(g.value(magnitude))?;
        let f = log_features(g, magnitude);
        self.config.encoder_net().forward(g, &self.params, f)
    }

    /// `ω·exp(G(ω·z, ω·π, (1−ω)·feat(s), ω)) + (1−ω)·s`, where `π = ±1` is the parity of each token id.
    pub fn decode_graph(&self, g: &mut Graph, codes: Var, ids: &[usize], magnitude: Var, mask: &FrameMask) -> Result<Var> {
        let (tc, ts) = (g.value(codes).rows(), g.value(magnitude).rows());
        self.check_magnitude(g.value(magnitude))?;
        if tc != ts || ids.len() != ts || mask.len() != ts || g.value(codes).cols() != self.config.code_dim {
            return Err(Error::ShapeMismatch(format!(
                "codes {:?}, magnitude {:?}, mask of {} frames",
                g.value(codes).shape(),
                g.value(magnitude).shape(),
                mask.len()
            )));
        }
        let w = mask.weights();
        let inv: Vec<f64> = w.iter().map(|v| 1.0 - v).collect();
        let wv = g.constant(Tensor::vector(w.clone()));
        let iv = g.constant(Tensor::vector(inv));
        let flag = g.constant(Tensor::matrix(ts, 1, w.clone()));
        let codes = self.standardize_codes(g, codes);
        let zq = g.mul_rows(codes, wv);
        let parity = ids.iter().zip(&w).map(|(&k, &m)| m * if k % 2 == 1 { 1.0 } else { -1.0 }).collect();
        let parity = g.constant(Tensor::matrix(ts, 1, parity));
        let f = log_features(g, magnitude);
        let f = g.mul_rows(f, iv);
        let input = g.concat_cols(&[zq, parity, f, flag]);
        let out = self.config.decoder_net().forward(g, &self.params, input)?;
        let gen = g.exp(out);
        let gen = g.mul_rows(gen, wv);
        let keep = g.mul_rows(magnitude, iv);
        Ok(g.add(gen, keep))
    }

    /// Per-dimension standardization by the codebook's own mean and spread
    /// (treated as constants), so the decoder sees codes on a common scale.
    fn standardize_codes(&self, g: &mut Graph, codes: Var) -> Var {
        let cb = self.params.get(CODEBOOK).expect("checked at construction");
        let (k, d) = (cb.rows(), cb.cols());
        let mut mean = vec![0.0; d];
        for i in 0..k {
            mean.iter_mut().zip(cb.row(i)).for_each(|(m, v)| *m += v / k as f64);
        }
        let mut inv = vec![0.0; d * d];
        for j in 0..d {
            let var = (0..k).map(|i| (cb.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / k as f64;
            inv[j * d + j] = 1.0 / (var.sqrt() + CODE_STD_FLOOR);
        }
        let shift = g.constant(Tensor::vector(mean.iter().map(|m| -m).collect()));
        let scale = g.constant(Tensor::matrix(d, d, inv));
        let centered = g.add_row(codes, shift);
        g.matmul(centered, scale)
    }

    /// Localizer logits (`T×1`).
    pub fn localizer_graph(&self, g: &mut Graph, magnitude: Var) -> Result<Var> {
        self.check_magnitude(g.value(magnitude))?;
        let f = log_features(g, magnitude);
        self.config.localizer_net().forward(g, &self.params, f)
    }

    /// Restorer logits (`T×1`) for "token id is odd".
    pub fn restorer_graph(&self, g: &mut Graph, magnitude: Var) -> Result<Var> {
        self.check_magnitude(g.value(magnitude))?;
        let f = log_features(g, magnitude);
        self.config.restorer_net().forward(g, &self.params, f)
    }

    pub fn encode(&self, magnitude: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let m = g.constant(magnitude.clone());
        let z = self.encode_graph(&mut g, m)?;
        Ok(g.value(z).clone())
    }

    pub fn tokenize(&self, magnitude: &Tensor) -> Result<CodeSequence> {
        self.codebook().quantize(&self.encode(magnitude)?)
    }

    /// Regenerates masked frames from their codes; unmasked frames pass through bit-identical.
    pub fn masked_decode(&self, codes: &CodeSequence, magnitude: &Tensor, mask: &FrameMask) -> Result<Tensor> {
        let mut g = Graph::inference();
        let c = g.constant(codes.vectors().clone());
        let m = g.constant(magnitude.clone());
        let out = self.decode_graph(&mut g, c, codes.ids(), m, mask)?;
        Ok(g.value(out).clone())
    }

    pub fn localizer_forward(&self, magnitude: &Tensor) -> Result<LocalizerOutput> {
        let mut g = Graph::inference();
        let m = g.constant(magnitude.clone());
        let l = self.localizer_graph(&mut g, m)?;
        let scores = sigmoid_column(g.value(l));
        let threshold = self.config.localizer_threshold;
        let detected = scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(t, _)| t).collect();
        Ok(LocalizerOutput { scores, threshold, detected })
    }

    pub fn restorer_forward(&self, magnitude: &Tensor) -> Result<RestorerOutput> {
        let mut g = Graph::inference();
        let m = g.constant(magnitude.clone());
        let l = self.restorer_graph(&mut g, m)?;
        Ok(RestorerOutput { parity_probs: sigmoid_column(g.value(l)) })
    }

    pub fn predict_masked(&self, ids: &[usize], mask: &FrameMask) -> Result<TokenDistribution> {
        manipulator::predict_masked(&self.params, &self.config.manipulator, self.config.codebook_size, ids, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manipulator::ManipulatorConfig;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            stft: StftConfig::new(64, 16, 64).unwrap(),
            codebook_size: 8,
            code_dim: 6,
            encoder: ConvNetConfig { hidden: 8, kernel: 3, dilations: vec![1] },
            decoder: ConvNetConfig { hidden: 8, kernel: 3, dilations: vec![1, 2] },
            manipulator: ManipulatorConfig { layers: 1, hidden: 8, heads: 2, filter: 16, kernel: 3, embedding: 8, max_len: 64 },
            ..ModelConfig::default()
        }
    }

    fn magnitude(t: usize, bins: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, bins, (0..t * bins).map(|_| rng.gen_range(0.0..2.0)).collect())
    }

    #[test]
    fn shapes() {
        let m = WatermarkModels::init(tiny_config(), 1).unwrap();
        let s = magnitude(20, 33, 2);
        assert_eq!(m.encode(&s).unwrap().shape(), &[20, 6]);
        let codes = m.tokenize(&s).unwrap();
        assert_eq!(codes.len(), 20);
        assert_eq!(m.localizer_forward(&s).unwrap().scores.len(), 20);
        assert_eq!(m.restorer_forward(&s).unwrap().parity_probs.len(), 20);
        assert!(m.encode(&magnitude(20, 32, 2)).is_err());
        assert!(m.require_stage1().is_err());
    }

    #[test]
    fn unmasked_frames_pass_through_bit_identical() {
        let m = WatermarkModels::init(tiny_config(), 3).unwrap();
        let s = magnitude(30, 33, 4);
        let codes = m.tokenize(&s).unwrap();
        let none = m.masked_decode(&codes, &s, &FrameMask::none(30)).unwrap();
        assert_eq!(none, s);
        let mask = FrameMask::from_positions(30, &[2, 10, 11, 29]).unwrap();
        let out = m.masked_decode(&codes, &s, &mask).unwrap();
        for t in 0..30 {
            if mask.flags()[t] {
                assert_ne!(out.row(t), s.row(t));
            } else {
                assert_eq!(out.row(t), s.row(t));
            }
        }
        assert!(m.masked_decode(&codes, &s, &FrameMask::none(29)).is_err());
    }
}
