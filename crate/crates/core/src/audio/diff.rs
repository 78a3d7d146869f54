//! STFT and iSTFT as graph operations, for training through the waveform domain.

use autograd::{Graph, Tensor, Var};
use rustfft::num_complex::Complex64;

use super::stft::StftEngine;

/// Overlap-add synthesis of `magnitude·e^{i·phase}`, differentiable in the magnitude.
///
/// `magnitude` is `T×F`; the phase is a constant. Output is a length-`num_samples` vector.
pub fn istft_fixed_phase(g: &mut Graph, engine: &StftEngine, magnitude: Var, phase: &Tensor, num_samples: usize) -> Var {
    let value = engine
        .istft_raw(g.value(magnitude), phase, num_samples)
        .expect("istft_fixed_phase: shapes checked by caller");
    let engine = engine.clone();
    let phase = phase.clone();
    g.custom(
        &[magnitude],
        Tensor::vector(value),
        Box::new(move |ctx| {
            let cfg = *engine.config();
            let (n_fft, hop, bins) = (cfg.n_fft, cfg.hop, cfg.bins());
            let frames = phase.rows();
            let env = engine.envelope(frames);
            let pad = n_fft / 2;
            let mut gbuf = vec![0.0; env.len()];
            for (j, &gj) in ctx.grad.data().iter().enumerate() {
                let e = env[j + pad];
                if e > 1e-10 {
                    gbuf[j + pad] = gj / e;
                }
            }
            let win = engine.window();
            let mut out = Tensor::zeros(&[frames, bins]);
            let mut seg = vec![0.0; n_fft];
            let mut scratch = Vec::new();
            let norm = 1.0 / n_fft as f64;
            for t in 0..frames {
                for i in 0..n_fft {
                    seg[i] = gbuf[t * hop + i] * win[i];
                }
                let spec = engine.forward_fft(&seg, &mut scratch);
                let row = out.row_mut(t);
                for k in 0..bins {
                    let c = if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 };
                    let rot = Complex64::from_polar(1.0, phase.row(t)[k]);
                    row[k] = c * norm * (rot * spec[k].conj()).re;
                }
            }
            vec![Some(out)]
        }),
    )
}

/// `sqrt(|STFT(x)|² + eps)` frames of a waveform vector, `T×F`.
pub fn stft_magnitude(g: &mut Graph, engine: &StftEngine, wave: Var, eps: f64) -> Var {
    let x = g.value(wave).data().to_vec();
    let n = x.len();
    engine.check_len(n).expect("stft_magnitude: signal too short");
    let spectra = engine.analyze(&x);
    let bins = engine.config().bins();
    let frames = spectra.len();
    let mut mag = Tensor::zeros(&[frames, bins]);
    for (t, s) in spectra.iter().enumerate() {
        for (k, c) in s.iter().enumerate() {
            mag.row_mut(t)[k] = (c.norm_sqr() + eps).sqrt();
        }
    }
    let engine = engine.clone();
    g.custom(
        &[wave],
        mag,
        Box::new(move |ctx| {
            let cfg = *engine.config();
            let (n_fft, hop) = (cfg.n_fft, cfg.hop);
            let win = engine.window();
            let mut gpad = vec![0.0; n + n_fft];
            let mut half = vec![Complex64::new(0.0, 0.0); bins];
            let mut frame = vec![0.0; n_fft];
            let mut scratch = Vec::new();
            for t in 0..frames {
                for k in 0..bins {
                    let m = ctx.output.row(t)[k];
                    half[k] = spectra[t][k] * (ctx.grad.row(t)[k] / m);
                }
                engine.one_sided_inverse(&half, &mut frame, &mut scratch);
                for i in 0..n_fft {
                    gpad[t * hop + i] += frame[i] * win[i];
                }
            }
            vec![Some(Tensor::vector(engine.reflect_pad_adjoint(&gpad, n)))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{StftConfig, Waveform};
    use autograd::gradcheck::{central_differences, relative_error, spread_coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_engine() -> StftEngine {
        StftEngine::new(StftConfig::new(16, 4, 12).unwrap()).unwrap()
    }

    #[test]
    fn istft_gradient_matches_finite_differences() {
        let engine = small_engine();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let w = Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 24_000).unwrap();
        let spec = engine.stft(&w).unwrap();
        let proj: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |mag: &Tensor| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let m = g.leaf(mag.clone());
            let y = istft_fixed_phase(&mut g, &engine, m, &spec.phase, n);
            let p = g.constant(Tensor::vector(proj.clone()));
            let prod = g.mul(y, p);
            let l = g.sum(prod);
            (g, m, l)
        };
        let (g, m, l) = loss(&spec.magnitude);
        let analytic = g.backward(l).wrt(m).unwrap().data().to_vec();
        let coords: Vec<usize> = (0..spec.magnitude.len()).collect();
        let numeric = central_differences(
            &mut |x| {
                let (g, _, l) = loss(&Tensor::new(spec.magnitude.shape(), x.to_vec()));
                g.value(l).item()
            },
            spec.magnitude.data(),
            &coords,
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn stft_magnitude_gradient_matches_finite_differences() {
        let engine = small_engine();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 45;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frames = engine.config().frames(n);
        let proj = Tensor::new(&[frames, 9], (0..frames * 9).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let loss = |x: &[f64]| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let w = g.leaf(Tensor::vector(x.to_vec()));
            let m = stft_magnitude(&mut g, &engine, w, 1e-12);
            let p = g.constant(proj.clone());
            let prod = g.mul(m, p);
            let l = g.sum(prod);
            (g, w, l)
        };
        let (g, w, l) = loss(&x);
        let analytic = g.backward(l).wrt(w).unwrap().data().to_vec();
        let coords = spread_coords(n, n);
        let numeric = central_differences(
            &mut |v| {
                let (g, _, l) = loss(v);
                g.value(l).item()
            },
            &x,
            &coords,
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn stft_magnitude_agrees_with_frontend() {
        let engine = StftEngine::new(StftConfig::default()).unwrap();
        let w = Waveform::new((0..2400).map(|i| ((i * 7 % 13) as f64 - 6.0) / 10.0).collect(), 24_000).unwrap();
        let spec = engine.stft(&w).unwrap();
        let mut g = Graph::inference();
        let v = g.constant(Tensor::vector(w.samples().to_vec()));
        let m = stft_magnitude(&mut g, &engine, v, 0.0);
        for (a, b) in g.value(m).data().iter().zip(spec.magnitude.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
