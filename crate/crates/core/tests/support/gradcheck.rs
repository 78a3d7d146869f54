//! Finite-difference checks of every trainable loss on small random instances.

use autograd::gradcheck::{central_differences, relative_error, spread_coords};
use autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmark::audio::{FrameMask, StftConfig};
use vqmark::manipulator::{self, masked_input, masked_token_loss, ManipulatorConfig};
use vqmark::models::{localizer_loss, restorer_loss, ModelConfig, WatermarkModels, CODEBOOK};
use vqmark::vq::{quantize_graph, vq_loss, ConvNetConfig, MultiResolutionStft};

const H: f64 = 1e-6;
const COORDS: usize = 6;

fn tiny_models() -> WatermarkModels {
    let cfg = ModelConfig {
        stft: StftConfig::new(64, 16, 64).unwrap(),
        codebook_size: 6,
        code_dim: 4,
        encoder: ConvNetConfig { hidden: 4, kernel: 3, dilations: vec![1] },
        decoder: ConvNetConfig { hidden: 4, kernel: 3, dilations: vec![1, 2] },
        manipulator: ManipulatorConfig { layers: 1, hidden: 8, heads: 2, filter: 8, kernel: 3, embedding: 8, max_len: 32 },
        ..ModelConfig::default()
    };
    WatermarkModels::init(cfg, 3).unwrap()
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Worst relative error between backprop and central differences over a spread
/// of coordinates of every parameter whose name starts with `prefix`.
fn param_check(models: &WatermarkModels, prefix: &str, loss: &dyn Fn(&WatermarkModels, &mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let l = loss(models, &mut g);
    let grads = g.backward(l).params();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, t) in models.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let coords = spread_coords(t.len(), COORDS);
        let a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
        let mut f = |x: &[f64]| {
            let mut m = models.clone();
            m.params.insert(name.clone(), Tensor::new(t.shape(), x.to_vec()));
            let mut g = Graph::inference();
            let l = loss(&m, &mut g);
            g.value(l).item()
        };
        let n = central_differences(&mut f, t.data(), &coords, H);
        worst = worst.max(relative_error(&a, &n));
        checked += 1;
    }
    assert!(checked > 0, "no parameters under {prefix}");
    worst
}

/// Backprop gradient of `loss` with respect to one leaf against central differences.
fn leaf_check(x: &Tensor, coords: &[usize], loss: &dyn Fn(&mut Graph, Var) -> (Var, Var)) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let (total, _) = loss(&mut g, v);
    let grads = g.backward(total);
    let analytic = grads.wrt(v).expect("leaf gradient");
    let a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    let mut f = |p: &[f64]| {
        let mut g = Graph::inference();
        let v = g.constant(Tensor::new(x.shape(), p.to_vec()));
        let (_, probe) = loss(&mut g, v);
        g.value(probe).item()
    };
    relative_error(&a, &central_differences(&mut f, x.data(), coords, H))
}

/// `(name, worst relative error)` for each loss.
pub fn all() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let models = tiny_models();
    let frames = 12;
    let bins = models.config.bins();
    let magnitude = random(frames, bins, 0.01, 1.0, &mut rng);
    let mask = FrameMask::from_positions(frames, &[1, 4, 5, 9]).unwrap();
    let ids: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..models.config.codebook_size)).collect();
    let mut out = Vec::new();

    let mag = magnitude.clone();
    let m2 = mask.clone();
    out.push((
        "localizer BCE",
        param_check(&models, "localizer.", &move |m, g| {
            let x = g.constant(mag.clone());
            let logits = m.localizer_graph(g, x).unwrap();
            localizer_loss(g, logits, &m2)
        }),
    ));

    let mag = magnitude.clone();
    let (m2, ids2) = (mask.clone(), ids.clone());
    out.push((
        "restorer BCE (parity)",
        param_check(&models, "restorer.", &move |m, g| {
            let x = g.constant(mag.clone());
            let logits = m.restorer_graph(g, x).unwrap();
            restorer_loss(g, logits, &ids2, &m2)
        }),
    ));

    let (m2, ids2) = (mask.clone(), ids.clone());
    out.push((
        "masked-token cross-entropy",
        param_check(&models, "manipulator.", &move |m, g| {
            let input = masked_input(&ids2, &m2, m.config.codebook_size).unwrap();
            let logits = manipulator::forward(g, &m.params, &m.config.manipulator, &input).unwrap();
            masked_token_loss(g, logits, &ids2, &m2)
        }),
    ));

    // Vector-quantization objective. The stop-gradients mean each trainable
    // input only sees its own term: the codebook through the codebook term, the
    // latents through β times the commitment term, the reconstruction through the
    // multi-resolution STFT term.
    let beta = models.config.commitment;
    let latents = random(frames, models.config.code_dim, -1.0, 1.0, &mut rng);
    let codebook = models.params.get(CODEBOOK).unwrap().clone();
    let coords = spread_coords(codebook.len(), 2 * COORDS);
    let lat = latents.clone();
    let codebook_err = leaf_check(&codebook, &coords, &move |g, cb| {
        let z = g.constant(lat.clone());
        let q = quantize_graph(g, z, cb).unwrap();
        let rec = g.constant(Tensor::scalar(0.0));
        let t = vq_loss(g, rec, &q, beta, None, 0.0);
        (t.total, q.codebook_loss)
    });
    let cb = codebook.clone();
    let latent_err = leaf_check(&latents, &spread_coords(latents.len(), 2 * COORDS), &move |g, z| {
        let c = g.constant(cb.clone());
        let q = quantize_graph(g, z, c).unwrap();
        let rec = g.constant(Tensor::scalar(0.0));
        let t = vq_loss(g, rec, &q, beta, None, 0.0);
        let probe = g.scale(q.commitment_loss, beta);
        (t.total, probe)
    });
    let mr = MultiResolutionStft::standard();
    let reference: Vec<f64> = (0..1600).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let targets = mr.targets(&reference).unwrap();
    let pred = Tensor::vector(reference.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect());
    let (lat, cb) = (latents.clone(), codebook.clone());
    let rec_err = leaf_check(&pred, &spread_coords(pred.len(), 2 * COORDS), &move |g, p| {
        let rec = mr.loss(g, p, &targets).unwrap();
        let z = g.constant(lat.clone());
        let c = g.constant(cb.clone());
        let q = quantize_graph(g, z, c).unwrap();
        let t = vq_loss(g, rec, &q, beta, None, 0.0);
        (t.total, t.total)
    });
    out.push(("VQ objective: codebook term", codebook_err));
    out.push(("VQ objective: commitment term", latent_err));
    out.push(("VQ objective: reconstruction term", rec_err));
    out
}
