use autograd::{Graph, Tensor, Var};

use crate::audio::diff::stft_magnitude;
use crate::audio::{StftConfig, StftEngine};
use crate::error::{Error, Result};
use crate::vq::QuantizedVars;

/// `(n_fft, hop)` pairs; the window spans the full FFT.
pub const MRSTFT_RESOLUTIONS: [(usize, usize); 3] = [(512, 128), (1024, 256), (2048, 512)];
pub const DEFAULT_LAMBDA_ADV: f64 = 1e-2;
pub const DEFAULT_COMMITMENT: f64 = 0.25;
const MAG_EPS: f64 = 1e-7;
const LOG_EPS: f64 = 1e-5;

/// Spectral convergence plus log-magnitude L1, averaged over resolutions.
#[derive(Clone)]
pub struct MultiResolutionStft {
    engines: Vec<StftEngine>,
}

impl MultiResolutionStft {
    pub fn new(resolutions: &[(usize, usize)]) -> Result<Self> {
        let engines = resolutions
            .iter()
            .map(|&(n, hop)| StftEngine::new(StftConfig::new(n, hop, n)?))
            .collect::<Result<Vec<_>>>()?;
        if engines.is_empty() {
            return Err(Error::InvalidStftConfig("no resolutions".into()));
        }
        Ok(Self { engines })
    }

    pub fn standard() -> Self {
        Self::new(&MRSTFT_RESOLUTIONS).expect("valid built-in resolutions")
    }

    fn usable(&self, len: usize) -> Result<Vec<&StftEngine>> {
        let e: Vec<_> = self.engines.iter().filter(|e| e.check_len(len).is_ok()).collect();
        if e.is_empty() {
            let min = self.engines.iter().map(|e| e.min_len()).min().unwrap_or(0);
            return Err(Error::SignalTooShort { len, min });
        }
        Ok(e)
    }

    /// Reference magnitudes at every resolution the signal is long enough for.
    pub fn targets(&self, reference: &[f64]) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::vector(reference.to_vec()));
        let mut out = Vec::new();
        for e in self.usable(reference.len())? {
            let m = stft_magnitude(&mut g, e, x, MAG_EPS);
            out.push(g.value(m).clone());
        }
        Ok(out)
    }

    pub fn loss(&self, g: &mut Graph, prediction: Var, targets: &[Tensor]) -> Result<Var> {
        let len = g.value(prediction).len();
        let engines = self.usable(len)?;
        if engines.len() != targets.len() {
            return Err(Error::ShapeMismatch("MR-STFT targets do not match signal length".into()));
        }
        let mut total: Option<Var> = None;
        for (e, target) in engines.into_iter().zip(targets) {
            let p = stft_magnitude(g, e, prediction, MAG_EPS);
            let t = g.constant(target.clone());
            let d = g.sub(t, p);
            let sq = g.square(d);
            let num = g.sum(sq);
            let num = g.add_scalar(num, 1e-12);
            let num = g.sqrt(num);
            let sc = g.scale(num, 1.0 / (target.sq_norm() + 1e-12).sqrt());
            let lt = g.constant(target.map(|v| (v + LOG_EPS).ln()));
            let lp = g.add_scalar(p, LOG_EPS);
            let lp = g.ln(lp);
            let d = g.sub(lt, lp);
            let d = g.abs(d);
            let lm = g.mean(d);
            let term = g.add(sc, lm);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        let n = targets.len() as f64;
        Ok(g.scale(total.expect("at least one resolution"), 1.0 / n))
    }
}

/// Generator-side adversarial objective. The default trainer runs without one.
pub trait AdversarialLoss {
    /// Loss on the generated waveform, to be minimized by the generator.
    fn generator_loss(&mut self, g: &mut Graph, fake: Var) -> Result<Var>;
    /// Updates the discriminator on a detached real/fake pair.
    fn update_discriminator(&mut self, real: &[f64], fake: &[f64]) -> Result<()>;
}

/// Least-squares GAN generator objective `mean((D(fake) − 1)²)` on discriminator scores.
pub fn lsgan_generator(g: &mut Graph, fake_scores: Var) -> Var {
    let d = g.add_scalar(fake_scores, -1.0);
    let sq = g.square(d);
    g.mean(sq)
}

/// Least-squares GAN discriminator objective `mean((D(real) − 1)²) + mean(D(fake)²)`.
pub fn lsgan_discriminator(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Var {
    let r = lsgan_generator(g, real_scores);
    let f = g.square(fake_scores);
    let f = g.mean(f);
    g.add(r, f)
}

/// Each term of the autoencoder objective, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VqLossTerms {
    pub rec: Var,
    pub codebook: Var,
    pub commitment: Var,
    /// `codebook + β·commitment`.
    pub code: Var,
    pub adv: Option<Var>,
    /// `rec + code + λ_adv·adv`.
    pub total: Var,
}

pub fn vq_loss(g: &mut Graph, rec: Var, q: &QuantizedVars, commitment: f64, adv: Option<Var>, lambda_adv: f64) -> VqLossTerms {
    let c = g.scale(q.commitment_loss, commitment);
    let code = g.add(q.codebook_loss, c);
    let mut total = g.add(rec, code);
    if let Some(a) = adv {
        let a = g.scale(a, lambda_adv);
        total = g.add(total, a);
    }
    VqLossTerms { rec, codebook: q.codebook_loss, commitment: q.commitment_loss, code, adv, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::quantize_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn rec_loss(mr: &MultiResolutionStft, reference: &[f64], pred: &[f64]) -> f64 {
        let t = mr.targets(reference).unwrap();
        let mut g = Graph::inference();
        let p = g.constant(Tensor::vector(pred.to_vec()));
        let l = mr.loss(&mut g, p, &t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn zero_when_reconstruction_and_codes_are_exact() {
        let mr = MultiResolutionStft::standard();
        let x = noise(6000, 1);
        let l = rec_loss(&mr, &x, &x);
        assert!(l < 1e-6, "{l}");
        let mut g = Graph::new();
        let cb = g.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]));
        let z = g.leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        let q = quantize_graph(&mut g, z, cb).unwrap();
        let rec = g.constant(Tensor::scalar(0.0));
        let terms = vq_loss(&mut g, rec, &q, DEFAULT_COMMITMENT, None, DEFAULT_LAMBDA_ADV);
        assert_eq!(g.value(terms.code).item(), 0.0);
        assert_eq!(g.value(terms.total).item(), 0.0);
    }

    #[test]
    fn larger_error_gives_larger_loss() {
        let mr = MultiResolutionStft::standard();
        let x = noise(6000, 2);
        let e = noise(6000, 3);
        let once: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + 0.05 * b).collect();
        let twice: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + 0.1 * b).collect();
        assert!(rec_loss(&mr, &x, &twice) > rec_loss(&mr, &x, &once));
    }

    #[test]
    fn short_signals_skip_wide_resolutions() {
        let mr = MultiResolutionStft::standard();
        assert_eq!(mr.targets(&noise(1500, 4)).unwrap().len(), 2);
        assert!(mr.targets(&noise(100, 4)).is_err());
    }

    #[test]
    fn total_is_sum_of_weighted_terms() {
        let mut g = Graph::new();
        let cb = g.leaf(Tensor::matrix(2, 1, vec![0.0, 1.0]));
        let z = g.leaf(Tensor::matrix(2, 1, vec![0.2, 0.7]));
        let q = quantize_graph(&mut g, z, cb).unwrap();
        let rec = g.constant(Tensor::scalar(0.5));
        let adv = g.constant(Tensor::scalar(3.0));
        let t = vq_loss(&mut g, rec, &q, 0.25, Some(adv), 1e-2);
        let want = 0.5 + g.value(t.codebook).item() + 0.25 * g.value(t.commitment).item() + 0.03;
        assert!((g.value(t.total).item() - want).abs() < 1e-15);
        assert!((g.value(t.codebook).item() - (0.04 + 0.09) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn lsgan_objectives() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let zeros = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let gl = lsgan_generator(&mut g, ones);
        assert_eq!(g.value(gl).item(), 0.0);
        let dl = lsgan_discriminator(&mut g, ones, zeros);
        assert_eq!(g.value(dl).item(), 0.0);
    }
}
