//! Every graph op's backward pass against central finite differences.

use autograd::gradcheck::{central_differences, relative_error};
use autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Checks d(loss)/d(inputs[i]) for every input, where the loss is a random
/// projection of the op output so that every output element matters.
fn check(inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Var) {
    let build = |vals: &[Tensor], proj: Option<&Tensor>| -> (Graph, Vec<Var>, Var, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.leaf(v.clone())).collect();
        let out = op(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let proj = proj.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            random(&shape, &mut r)
        });
        let p = g.constant(proj.clone());
        let flat_out = g.reshape(out, &[proj.len()]);
        let flat_p = g.reshape(p, &[proj.len()]);
        let prod = g.mul(flat_out, flat_p);
        let loss = g.sum(prod);
        (g, vars, loss, proj)
    };
    let (g, vars, loss, proj) = build(&inputs, None);
    let grads = g.backward(loss);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("gradient").data().to_vec();
        let coords: Vec<usize> = (0..inputs[i].len()).collect();
        let mut f = |x: &[f64]| {
            let mut vals = inputs.clone();
            vals[i] = Tensor::new(inputs[i].shape(), x.to_vec());
            let (g, _, loss, _) = build(&vals, Some(&proj));
            g.value(loss).item()
        };
        let numeric = central_differences(&mut f, inputs[i].data(), &coords, 1e-6);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "input {i}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![a.map(|x| x.abs() + 0.5)], |g, v| g.ln(v[0]));
    check(vec![a.map(|x| x.abs() + 0.5)], |g, v| g.sqrt(v[0]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.softplus(v[0]));
    check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.abs(v[0]));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    check(vec![a], |g, v| g.scale(v[0], -1.7));
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    let at = random(&[4, 3], &mut rng);
    let bt = random(&[5, 4], &mut rng);
    check(vec![at.clone(), b.clone()], |g, v| g.matmul_t(v[0], v[1], true, false));
    check(vec![a.clone(), bt.clone()], |g, v| g.matmul_t(v[0], v[1], false, true));
    check(vec![at, bt], |g, v| g.matmul_t(v[0], v[1], true, true));
    let bias = random(&[4], &mut rng);
    check(vec![a.clone(), bias], |g, v| g.add_row(v[0], v[1]));
    let w = random(&[3], &mut rng);
    check(vec![a.clone(), w], |g, v| g.mul_rows(v[0], v[1]));
    let c = random(&[3, 2], &mut rng);
    check(vec![a.clone(), c], |g, v| g.concat_cols(&[v[0], v[1]]));
    check(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
    check(vec![a.clone()], |g, v| g.softmax_rows(v[0]));
    check(vec![a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]));
    let gain = random(&[4], &mut rng);
    let lb = random(&[4], &mut rng);
    check(vec![a, gain, lb], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn conv1d_with_dilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (kernel, dilation) in [(3, 1), (3, 2), (5, 1), (1, 1)] {
        let x = random(&[7, 3], &mut rng);
        let w = random(&[kernel * 3, 2], &mut rng);
        let b = random(&[2], &mut rng);
        check(vec![x, w, b], move |g, v| g.conv1d(v[0], v[1], v[2], kernel, dilation));
    }
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&[5, 6], &mut rng);
    check(vec![logits], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2, 3], &[1.0, 0.0, 1.0, 0.5, 1.0]));
    let l = random(&[5], &mut rng);
    check(vec![l], |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.3], &[1.0, 1.0, 0.0, 2.0, 1.0]));
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, cin, cout, k, d) = (6, 2, 3, 3, 2);
    let x = random(&[t, cin], &mut rng);
    let w = random(&[k * cin, cout], &mut rng);
    let b = random(&[cout], &mut rng);
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1d(xv, wv, bv, k, d);
    let half = (k - 1) / 2 * d;
    for r in 0..t {
        for o in 0..cout {
            let mut s = b.data()[o];
            for tap in 0..k {
                let src = r as isize + (tap * d) as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for c in 0..cin {
                    s += x.row(src as usize)[c] * w.row(tap * cin + c)[o];
                }
            }
            assert!((g.value(y).row(r)[o] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = autograd::ParamStore::new();
    store.init_const("enc.w", &[2], 1.5);
    store.init_const("dec.w", &[2], 2.0);
    let mut g = Graph::new();
    g.freeze("enc.");
    let a = g.param(&store, "enc.w");
    let b = g.param(&store, "dec.w");
    let p = g.mul(a, b);
    let loss = g.sum(p);
    let grads = g.backward(loss).params();
    assert!(!grads.contains_key("enc.w"));
    assert_eq!(grads["dec.w"].data(), &[1.5, 1.5]);
}
