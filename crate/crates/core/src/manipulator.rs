//! Non-autoregressive masked token prediction and parity-constrained selection.
//!
//! Masked frames enter as a reserved `MASK` id (`K`), so every masked output
//! is predicted from the unmasked context in a single parallel pass.

use autograd::{log_sum_exp, Graph, ParamStore, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FrameMask;
use crate::error::{Error, Result};

pub const PREFIX: &str = "manipulator";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub filter: usize,
    pub kernel: usize,
    pub embedding: usize,
    /// Longest sequence one pass attends over; longer inputs are split into chunks.
    pub max_len: usize,
}

impl Default for ManipulatorConfig {
    fn default() -> Self {
        Self { layers: 4, hidden: 128, heads: 2, filter: 512, kernel: 5, embedding: 128, max_len: 1024 }
    }
}

impl ManipulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.layers, self.hidden, self.heads, self.filter, self.kernel, self.embedding, self.max_len];
        if positive.contains(&0) {
            return Err(Error::Config(format!("manipulator sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("manipulator kernel must be odd".into()));
        }
        Ok(())
    }
}

/// How a replacement token is picked inside the required parity class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    Argmax,
    Temperature { tau: f64 },
}

/// Per-frame logits over the `K` codebook ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    logits: Tensor,
}

impl TokenDistribution {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 2 || !logits.all_finite() {
            return Err(Error::InvalidArgument("token logits must be a finite T×K matrix".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn frames(&self) -> usize {
        self.logits.rows()
    }

    pub fn vocab(&self) -> usize {
        self.logits.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.logits.row(t)
    }

    pub fn probabilities(&self, t: usize) -> Vec<f64> {
        let row = self.row(t);
        let lse = log_sum_exp(row);
        row.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// Picks an id with `id % 2 == parity` from one row of logits.
///
/// Argmax breaks ties toward the lowest id; temperature mode samples from the
/// softmax restricted to the parity class.
pub fn sample_parity_token(logits: &[f64], parity: u8, mode: SamplingMode, rng: &mut impl Rng) -> Result<usize> {
    let parity = (parity & 1) as usize;
    let class: Vec<usize> = (parity..logits.len()).step_by(2).collect();
    if class.is_empty() {
        return Err(Error::EmptyParityClass(parity as u8));
    }
    match mode {
        SamplingMode::Argmax => {
            let mut best = class[0];
            for &k in &class[1..] {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            Ok(best)
        }
        SamplingMode::Temperature { tau } => {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
            }
            let scaled: Vec<f64> = class.iter().map(|&k| logits[k] / tau).collect();
            let lse = log_sum_exp(&scaled);
            let weights: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(class[dist.sample(rng)])
        }
    }
}

fn name(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

/// Adds manipulator parameters for a `vocab`-entry codebook.
pub fn init_params(store: &mut ParamStore, cfg: &ManipulatorConfig, vocab: usize, rng: &mut impl Rng) {
    let (h, f, k) = (cfg.hidden, cfg.filter, cfg.kernel);
    store.init_normal(&name("embed"), &[vocab + 1, cfg.embedding], 0.3, rng);
    if cfg.embedding != h {
        store.init_normal(&name("embed_proj"), &[cfg.embedding, h], (1.0 / cfg.embedding as f64).sqrt(), rng);
    }
    store.init_normal(&name("pos"), &[cfg.max_len, h], 0.1, rng);
    let lin = (1.0 / h as f64).sqrt();
    for l in 0..cfg.layers {
        for p in ["q", "k", "v", "o"] {
            store.init_normal(&name(&format!("layer{l}.attn.{p}.w")), &[h, h], lin, rng);
            store.init_const(&name(&format!("layer{l}.attn.{p}.b")), &[h], 0.0);
        }
        store.init_const(&name(&format!("layer{l}.ln1.g")), &[h], 1.0);
        store.init_const(&name(&format!("layer{l}.ln1.b")), &[h], 0.0);
        store.init_normal(&name(&format!("layer{l}.ff1.w")), &[k * h, f], (1.0 / (k * h) as f64).sqrt(), rng);
        store.init_const(&name(&format!("layer{l}.ff1.b")), &[f], 0.0);
        store.init_normal(&name(&format!("layer{l}.ff2.w")), &[f, h], (1.0 / f as f64).sqrt(), rng);
        store.init_const(&name(&format!("layer{l}.ff2.b")), &[h], 0.0);
        store.init_const(&name(&format!("layer{l}.ln2.g")), &[h], 1.0);
        store.init_const(&name(&format!("layer{l}.ln2.b")), &[h], 0.0);
    }
    // Zero output layer: uniform predictions at initialization.
    store.init_const(&name("out.w"), &[h, vocab], 0.0);
    store.init_const(&name("out.b"), &[vocab], 0.0);
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Var {
    let w = g.param(store, &name(&format!("{prefix}.w")));
    let b = g.param(store, &name(&format!("{prefix}.b")));
    g.conv1d(x, w, b, 1, 1)
}

/// Input ids with masked frames replaced by the reserved `MASK` id.
pub fn masked_input(ids: &[usize], mask: &FrameMask, vocab: usize) -> Result<Vec<usize>> {
    if ids.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("{} ids vs mask of {} frames", ids.len(), mask.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside codebook of {vocab}")));
    }
    Ok(ids.iter().zip(mask.flags()).map(|(&i, &m)| if m { vocab } else { i }).collect())
}

/// Logits (`T×K`) for one chunk of at most `max_len` input ids.
pub fn forward(g: &mut Graph, store: &ParamStore, cfg: &ManipulatorConfig, input: &[usize]) -> Result<Var> {
    let t = input.len();
    if t == 0 || t > cfg.max_len {
        return Err(Error::ShapeMismatch(format!("manipulator chunk of {t} frames (max {})", cfg.max_len)));
    }
    let h = cfg.hidden;
    let dh = h / cfg.heads;
    let emb = g.param(store, &name("embed"));
    let mut x = g.gather_rows(emb, input);
    if cfg.embedding != h {
        let p = g.param(store, &name("embed_proj"));
        x = g.matmul(x, p);
    }
    let pos = g.param(store, &name("pos"));
    let positions: Vec<usize> = (0..t).collect();
    let p = g.gather_rows(pos, &positions);
    x = g.add(x, p);
    for l in 0..cfg.layers {
        let q = linear(g, store, x, &format!("layer{l}.attn.q"));
        let k = linear(g, store, x, &format!("layer{l}.attn.k"));
        let v = linear(g, store, x, &format!("layer{l}.attn.v"));
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let s = g.matmul_t(qh, kh, false, true);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let o = linear(g, store, o, &format!("layer{l}.attn.o"));
        let r = g.add(x, o);
        let lg = g.param(store, &name(&format!("layer{l}.ln1.g")));
        let lb = g.param(store, &name(&format!("layer{l}.ln1.b")));
        x = g.layer_norm(r, lg, lb, LN_EPS);
        let w1 = g.param(store, &name(&format!("layer{l}.ff1.w")));
        let b1 = g.param(store, &name(&format!("layer{l}.ff1.b")));
        let f = g.conv1d(x, w1, b1, cfg.kernel, 1);
        let f = g.relu(f);
        let f = linear(g, store, f, &format!("layer{l}.ff2"));
        let r = g.add(x, f);
        let lg = g.param(store, &name(&format!("layer{l}.ln2.g")));
        let lb = g.param(store, &name(&format!("layer{l}.ln2.b")));
        x = g.layer_norm(r, lg, lb, LN_EPS);
    }
    Ok(linear(g, store, x, "out"))
}

/// Cross-entropy of the original ids at masked frames only.
pub fn masked_token_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &FrameMask) -> Var {
    g.cross_entropy(logits, targets, &mask.weights())
}

/// Splits `0..len` into consecutive chunks of at most `max_len`.
pub fn chunks(len: usize, max_len: usize) -> Vec<std::ops::Range<usize>> {
    (0..len).step_by(max_len.max(1)).map(|s| s..(s + max_len).min(len)).collect()
}

/// Predicts logits for every frame in one parallel pass per chunk.
pub fn predict_masked(
    store: &ParamStore,
    cfg: &ManipulatorConfig,
    vocab: usize,
    ids: &[usize],
    mask: &FrameMask,
) -> Result<TokenDistribution> {
    let input = masked_input(ids, mask, vocab)?;
    let mut data = Vec::with_capacity(ids.len() * vocab);
    for range in chunks(input.len(), cfg.max_len) {
        let mut g = Graph::inference();
        let logits = forward(&mut g, store, cfg, &input[range])?;
        data.extend_from_slice(g.value(logits).data());
    }
    TokenDistribution::new(Tensor::matrix(ids.len(), vocab, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::{Adam, AdamConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ManipulatorConfig {
        ManipulatorConfig { layers: 2, hidden: 16, heads: 2, filter: 32, kernel: 3, embedding: 16, max_len: 64 }
    }

    #[test]
    fn highest_probability_odd_token() {
        let mut logits = vec![0.0; 8];
        logits[5] = 3.0;
        logits[2] = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_parity_token(&logits, 1, SamplingMode::Argmax, &mut rng).unwrap(), 5);
        assert_eq!(sample_parity_token(&logits, 0, SamplingMode::Argmax, &mut rng).unwrap(), 2);
    }

    #[test]
    fn uniform_logits_pick_lowest_even_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_parity_token(&[0.5; 10], 0, SamplingMode::Argmax, &mut rng).unwrap(), 0);
        assert_eq!(sample_parity_token(&[0.5; 10], 1, SamplingMode::Argmax, &mut rng).unwrap(), 1);
        assert!(sample_parity_token(&[0.5], 1, SamplingMode::Argmax, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn parity_always_holds(logits in proptest::collection::vec(-20.0f64..20.0, 2..64), parity in 0u8..2, tau in 0.1f64..5.0, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for mode in [SamplingMode::Argmax, SamplingMode::Temperature { tau }] {
                let id = sample_parity_token(&logits, parity, mode, &mut rng).unwrap();
                prop_assert_eq!(id % 2, parity as usize);
                prop_assert!(id < logits.len());
            }
        }

        #[test]
        fn argmax_is_shift_invariant(logits in proptest::collection::vec(-20.0f64..20.0, 2..64), parity in 0u8..2, shift in -100.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let a = sample_parity_token(&logits, parity, SamplingMode::Argmax, &mut rng).unwrap();
            let b = sample_parity_token(&shifted, parity, SamplingMode::Argmax, &mut rng).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    fn model(vocab: usize) -> (ParamStore, ManipulatorConfig) {
        let cfg = small();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, vocab, &mut ChaCha8Rng::seed_from_u64(7));
        (store, cfg)
    }

    #[test]
    fn shapes_and_normalization() {
        let (store, cfg) = model(12);
        let ids: Vec<usize> = (0..150).map(|i| i % 12).collect();
        let mask = FrameMask::from_positions(150, &[3, 70, 149]).unwrap();
        let d = predict_masked(&store, &cfg, 12, &ids, &mask).unwrap();
        assert_eq!((d.frames(), d.vocab()), (150, 12));
        for t in 0..150 {
            assert!((d.probabilities(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(predict_masked(&store, &cfg, 12, &ids[..10], &mask).is_err());
    }

    #[test]
    fn masked_values_do_not_leak() {
        let (mut store, cfg) = model(12);
        store.init_normal(&name("out.w"), &[cfg.hidden, 12], 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let mask = FrameMask::from_positions(30, &[4, 5, 20]).unwrap();
        let a: Vec<usize> = (0..30).map(|i| (i * 7) % 12).collect();
        let mut b = a.clone();
        b[4] = 11;
        b[20] = 0;
        let da = predict_masked(&store, &cfg, 12, &a, &mask).unwrap();
        let db = predict_masked(&store, &cfg, 12, &b, &mask).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        let (store, cfg) = model(32);
        let ids: Vec<usize> = (0..40).map(|i| (i * 5) % 32).collect();
        let mask = FrameMask::from_positions(40, &[1, 9, 17, 30]).unwrap();
        let mut g = Graph::new();
        let input = masked_input(&ids, &mask, 32).unwrap();
        let logits = forward(&mut g, &store, &cfg, &input).unwrap();
        let loss = masked_token_loss(&mut g, logits, &ids, &mask);
        assert!((g.value(loss).item() - 32f64.ln()).abs() < 1e-12);
    }

    /// On sequences where token `2` is always followed by `3`, a masked slot right
    /// after a `2` is predicted as `3`.
    #[test]
    fn learns_a_deterministic_successor() {
        let vocab = 8;
        let (mut store, cfg) = model(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut adam = Adam::new(AdamConfig::default());
        let make = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut s = Vec::with_capacity(24);
            while s.len() < 24 {
                let tok = rng.gen_range(0..vocab);
                s.push(tok);
                if tok == 2 && s.len() < 24 {
                    s.push(3);
                }
            }
            s
        };
        for _ in 0..300 {
            let ids = make(&mut rng);
            let pos: Vec<usize> = (1..24).filter(|&t| ids[t - 1] == 2).collect();
            if pos.is_empty() {
                continue;
            }
            let mask = FrameMask::from_positions(24, &pos).unwrap();
            let mut g = Graph::new();
            let input = masked_input(&ids, &mask, vocab).unwrap();
            let logits = forward(&mut g, &store, &cfg, &input).unwrap();
            let loss = masked_token_loss(&mut g, logits, &ids, &mask);
            let grads = g.backward(loss).params();
            adam.step(&mut store, &grads, 3e-3);
        }
        let ids = vec![5, 2, 3, 1, 6, 2, 3, 0, 7, 4];
        let mask = FrameMask::from_positions(10, &[2, 6]).unwrap();
        let d = predict_masked(&store, &cfg, vocab, &ids, &mask).unwrap();
        for t in [2, 6] {
            let p = d.probabilities(t);
            let arg = (0..vocab).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            assert_eq!(arg, 3, "{p:?}");
        }
    }

    #[test]
    fn chunking_covers_everything() {
        assert_eq!(chunks(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(chunks(4, 4), vec![0..4]);
    }
}
