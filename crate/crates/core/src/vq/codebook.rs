use autograd::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Usage bookkeeping for dead-code reinitialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinitConfig {
    /// EMA decay of per-step assignment counts.
    pub decay: f64,
    /// Entries whose EMA usage falls below this are revived.
    pub threshold: f64,
    /// Std of the Gaussian jitter added to a revived entry.
    pub noise: f64,
}

impl Default for ReinitConfig {
    fn default() -> Self {
        Self { decay: 0.99, threshold: 1.0, noise: 1e-2 }
    }
}

/// `K` code vectors of width `d` plus running usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: Vec<f64>,
}

/// Token ids and their code vectors; `vectors` row `t` is always `entries[ids[t]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSequence {
    ids: Vec<usize>,
    vectors: Tensor,
}

impl CodeSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if entries.rows() < 2 {
            return Err(Error::EmptyParityClass(1));
        }
        if !entries.all_finite() {
            return Err(Error::InvalidArgument("codebook entries must be finite".into()));
        }
        let usage = vec![0.0; entries.rows()];
        Ok(Self { entries, usage })
    }

    pub fn with_usage(entries: Tensor, usage: Vec<f64>) -> Result<Self> {
        let mut cb = Self::new(entries)?;
        if usage.len() != cb.size() {
            return Err(Error::ShapeMismatch(format!("{} usage counts for {} entries", usage.len(), cb.size())));
        }
        cb.usage = usage;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &[f64] {
        self.entries.row(id)
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let d: f64 = self.entry(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Nearest-entry ids for every row of a `T×d` latent matrix.
    pub fn assign(&self, latents: &Tensor) -> Result<Vec<usize>> {
        if latents.shape().len() != 2 || latents.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latents {:?} vs code width {}",
                latents.shape(),
                self.dim()
            )));
        }
        Ok((0..latents.rows()).map(|t| self.nearest(latents.row(t)).0).collect())
    }

    pub fn quantize(&self, latents: &Tensor) -> Result<CodeSequence> {
        let ids = self.assign(latents)?;
        self.lookup(&ids)
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<CodeSequence> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.size() {
                return Err(Error::InvalidArgument(format!("code id {id} outside codebook of {}", self.size())));
            }
            data.extend_from_slice(self.entry(id));
        }
        Ok(CodeSequence { ids: ids.to_vec(), vectors: Tensor::matrix(ids.len(), d, data) })
    }

    /// Folds one step's assignment counts into the usage EMA.
    pub fn record_usage(&mut self, ids: &[usize], decay: f64) {
        let mut counts = vec![0.0; self.size()];
        for &i in ids {
            counts[i] += 1.0;
        }
        for (u, c) in self.usage.iter_mut().zip(counts) {
            *u = decay * *u + (1.0 - decay) * c;
        }
    }

    pub fn set_usage(&mut self, usage: Vec<f64>) {
        assert_eq!(usage.len(), self.size());
        self.usage = usage;
    }

    pub fn set_entries(&mut self, entries: Tensor) -> Result<()> {
        if entries.shape() != self.entries.shape() {
            return Err(Error::ShapeMismatch("codebook shape changed".into()));
        }
        self.entries = entries;
        Ok(())
    }

    /// Replaces every entry whose usage EMA is below `cfg.threshold` with a
    /// randomly drawn row of `recent` plus Gaussian jitter. Revived entries get
    /// their usage reset to the threshold. Returns the revived ids.
    pub fn reinit_dead(&mut self, recent: &Tensor, cfg: &ReinitConfig, rng: &mut impl Rng) -> Vec<usize> {
        if recent.shape().len() != 2 || recent.rows() == 0 || recent.cols() != self.dim() {
            return Vec::new();
        }
        let dead: Vec<usize> = (0..self.size()).filter(|&k| self.usage[k] < cfg.threshold).collect();
        if dead.is_empty() {
            return dead;
        }
        let jitter = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
        let mut rows: Vec<usize> = (0..recent.rows()).collect();
        rows.shuffle(rng);
        for (i, &k) in dead.iter().enumerate() {
            let src = recent.row(rows[i % rows.len()]).to_vec();
            for (e, s) in self.entries.row_mut(k).iter_mut().zip(src) {
                *e = s + if cfg.noise > 0.0 { jitter.sample(rng) } else { 0.0 };
            }
            self.usage[k] = cfg.threshold;
        }
        dead
    }
}

/// Graph-side quantization with the straight-through estimator.
pub struct QuantizedVars {
    /// Quantized vectors in the forward pass; gradient passes straight to the latents.
    pub quantized: Var,
    /// `mean ‖sg(z_e) − e‖²`, trains the codebook.
    pub codebook_loss: Var,
    /// `mean ‖z_e − sg(e)‖²`, unweighted; pulls encoder outputs toward their codes.
    pub commitment_loss: Var,
    pub ids: Vec<usize>,
}

/// Quantizes `latents` (`T×d`) against the `codebook` variable (`K×d`).
pub fn quantize_graph(g: &mut Graph, latents: Var, codebook: Var) -> Result<QuantizedVars> {
    let cb = Codebook::new(g.value(codebook).clone())?;
    let ids = cb.assign(g.value(latents))?;
    let chosen = g.gather_rows(codebook, &ids);
    let latents_sg = g.detach(latents);
    let diff = g.sub(latents_sg, chosen);
    let sq = g.square(diff);
    let codebook_loss = g.mean(sq);
    let chosen_sg = g.detach(chosen);
    let diff = g.sub(latents, chosen_sg);
    let sq = g.square(diff);
    let commitment_loss = g.mean(sq);
    let value = g.value(chosen).clone();
    let quantized = g.custom(&[latents], value, Box::new(|ctx| vec![Some(ctx.grad.clone())]));
    Ok(QuantizedVars { quantized, codebook_loss, commitment_loss, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Exhaustive oracle, written independently of `Codebook::nearest`.
    fn brute_force(entries: &Tensor, v: &[f64]) -> usize {
        let dists: Vec<f64> = (0..entries.rows())
            .map(|k| entries.row(k).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    #[test]
    fn exact_entry_maps_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::new(random_tensor(16, 8, &mut rng)).unwrap();
        let latents = Tensor::matrix(1, 8, cb.entry(7).to_vec());
        let q = cb.quantize(&latents).unwrap();
        assert_eq!(q.ids(), &[7]);
        assert_eq!(q.vectors().row(0), cb.entry(7));
        assert_eq!(cb.nearest(cb.entry(7)).1, 0.0);
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let cb = Codebook::new(Tensor::matrix(3, 1, vec![1.0, -1.0, 1.0])).unwrap();
        assert_eq!(cb.nearest(&[0.0]).0, 0);
        assert_eq!(cb.nearest(&[5.0]).0, 0);
    }

    #[test]
    fn single_entry_or_mismatched_width_is_rejected() {
        assert!(Codebook::new(Tensor::matrix(1, 2, vec![0.0, 0.0])).is_err());
        let cb = Codebook::new(Tensor::zeros(&[4, 3])).unwrap();
        assert!(cb.quantize(&Tensor::zeros(&[2, 4])).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed: u64, k in 2usize..=256, d in 1usize..6, t in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::new(random_tensor(k, d, &mut rng)).unwrap();
            let latents = random_tensor(t, d, &mut rng);
            let q = cb.quantize(&latents).unwrap();
            for r in 0..t {
                prop_assert_eq!(q.ids()[r], brute_force(cb.entries(), latents.row(r)));
                prop_assert_eq!(q.vectors().row(r), cb.entry(q.ids()[r]));
            }
        }
    }

    #[test]
    fn reinit_is_noop_when_all_alive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = Codebook::new(random_tensor(4, 2, &mut rng)).unwrap();
        cb.set_usage(vec![5.0; 4]);
        let before = cb.clone();
        let revived = cb.reinit_dead(&random_tensor(10, 2, &mut rng), &ReinitConfig::default(), &mut rng);
        assert!(revived.is_empty());
        assert_eq!(cb, before);
    }

    /// Two clusters of data and a codebook entry planted far from both: the
    /// planted entry is never selected, gets revived onto the data, and usage
    /// coverage does not drop.
    #[test]
    fn planted_dead_code_is_revived() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { -1.0 } else { 1.0 };
            data.extend([c + normal.sample(&mut rng), c + normal.sample(&mut rng)]);
        }
        let data = Tensor::matrix(200, 2, data);
        let entries = Tensor::matrix(4, 2, vec![-1.0, -1.0, 1.0, 1.0, 50.0, 50.0, -0.9, -1.1]);
        let mut cb = Codebook::new(entries).unwrap();
        cb.set_usage(vec![2.0; 4]);
        let cfg = ReinitConfig::default();
        for _ in 0..400 {
            let ids = cb.assign(&data).unwrap();
            cb.record_usage(&ids, cfg.decay);
        }
        let used_before = used_fraction(&cb, &data);
        assert!(cb.usage()[2] < cfg.threshold);
        let kept: Vec<Vec<f64>> = [0, 1, 3].iter().map(|&k| cb.entry(k).to_vec()).collect();
        let revived = cb.reinit_dead(&data, &cfg, &mut rng);
        assert!(revived.contains(&2));
        assert!(cb.entry(2)[0].abs() < 2.0, "revived onto the data");
        for (i, &k) in [0, 1, 3].iter().enumerate() {
            if !revived.contains(&k) {
                assert_eq!(cb.entry(k), kept[i].as_slice(), "live entries untouched");
            }
        }
        let used_after = used_fraction(&cb, &data);
        assert!(used_after > used_before || used_after == 1.0, "{used_before} -> {used_after}");
    }

    fn used_fraction(cb: &Codebook, data: &Tensor) -> f64 {
        let ids = cb.assign(data).unwrap();
        let mut seen = vec![false; cb.size()];
        ids.iter().for_each(|&i| seen[i] = true);
        seen.iter().filter(|&&s| s).count() as f64 / cb.size() as f64
    }

    #[test]
    fn straight_through_passes_gradient_to_latents() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.9, 1.1]));
        let cb = g.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]));
        let q = quantize_graph(&mut g, z, cb).unwrap();
        assert_eq!(q.ids, vec![0, 1]);
        assert_eq!(g.value(q.quantized).data(), &[0.0, 0.0, 1.0, 1.0]);
        let s = g.sum(q.quantized);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(z).unwrap().data(), &[1.0; 4]);
        assert!(grads.wrt(cb).is_none());
    }
}
