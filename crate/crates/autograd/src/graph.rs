//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! a closure computing the vector-Jacobian product for its inputs. Nodes are
//! appended in topological order, so the backward pass is a single reverse
//! sweep.

use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), frozen: Vec::new(), grad_enabled: true }
    }

    /// A graph that records values only. Parameters become constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// An input we want gradients for.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Vec::new(), None, rg)
    }

    /// Binds a named parameter. Repeated binds of the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let trainable = self.grad_enabled && !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Vec::new(), None, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an operation with a hand-written vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(backward), requires)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Gradients { grads, params }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter bound in the graph.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn unary(g: &mut Graph, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let value = g.value(a).map(f);
    g.custom(
        &[a],
        value,
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let data = ctx.grad.data().iter().enumerate().map(|(i, gr)| gr * df(x[i], y[i])).collect();
            vec![Some(Tensor::new(ctx.grad.shape(), data))]
        }),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
                let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(&[a], value, Box::new(move |ctx| vec![Some(ctx.grad.map(|x| x * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        unary(self, a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        unary(self, a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        unary(self, a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        unary(self, a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        unary(self, a, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        unary(self, a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        unary(self, a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        unary(self, a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        unary(self, a, move |x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `a · b` with optional transposes; both operands 2-D.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let value = self.value(a).matmul(self.value(b), trans_a, trans_b);
        self.custom(
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                // C = op(A) op(B). dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                let ga = ctx.needs[0].then(|| {
                    if trans_a {
                        bv.matmul(g, trans_b, true)
                    } else {
                        g.matmul(bv, false, !trans_b)
                    }
                });
                let gb = ctx.needs[1].then(|| {
                    if trans_b {
                        g.matmul(av, true, trans_a)
                    } else {
                        av.matmul(g, !trans_a, false)
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Adds a length-`C` vector to every row of a `T×C` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        assert_eq!(bv.len(), c, "bias length mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.custom(
            &[a, bias],
            out,
            Box::new(|ctx| {
                let g = ctx.grad;
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    Tensor::new(ctx.inputs[1].shape(), acc)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// Scales row `t` of a `T×C` matrix by `w[t]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.len(), av.rows(), "row weight length mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = wv.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.custom(
            &[a, w],
            out,
            Box::new(|ctx| {
                let (av, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = wv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    ga
                });
                let gw = ctx.needs[1].then(|| {
                    let d = (0..g.rows()).map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()).collect();
                    Tensor::new(wv.shape(), d)
                });
                vec![ga, gw]
            }),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        self.custom(
            parts,
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        res.push(Some(Tensor::matrix(rows, w, d)));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            }),
        )
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        let rows = av.rows();
        let mut d = Vec::with_capacity(rows * width);
        for r in 0..rows {
            d.extend_from_slice(&av.row(r)[start..start + width]);
        }
        self.custom(
            &[a],
            Tensor::matrix(rows, width, d),
            Box::new(move |ctx| {
                let mut ga = Tensor::zeros(ctx.inputs[0].shape());
                for r in 0..rows {
                    ga.row_mut(r)[start..start + width].copy_from_slice(ctx.grad.row(r));
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut d = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            d.extend_from_slice(tv.row(i));
        }
        let ids = ids.to_vec();
        self.custom(
            &[table],
            Tensor::matrix(ids.len(), c, d),
            Box::new(move |ctx| {
                let mut gt = Tensor::zeros(ctx.inputs[0].shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (a, b) in gt.row_mut(i).iter_mut().zip(ctx.grad.row(r)) {
                        *a += b;
                    }
                }
                vec![Some(gt)]
            }),
        )
    }

    /// Row-wise layer normalization of a `T×C` matrix with affine `gain`/`bias` (length C).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let (gv, bv) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let mut xhat = Tensor::zeros(&[rows, c]);
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(&[rows, c]);
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (x[j] - mean) * is;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xhat.row(r)[j] * gv[j] + bv[j];
            }
        }
        self.custom(
            &[a, gain, bias],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gain = ctx.inputs[1].data();
                let mut ga = Tensor::zeros(&[rows, c]);
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    for j in 0..c {
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                    }
                    let dxh: Vec<f64> = (0..c).map(|j| gr[j] * gain[j]).collect();
                    let m1 = dxh.iter().sum::<f64>() / c as f64;
                    let m2 = dxh.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    let out = ga.row_mut(r);
                    for j in 0..c {
                        out[j] = inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
                vec![
                    Some(ga),
                    Some(Tensor::new(ctx.inputs[1].shape(), gg)),
                    Some(Tensor::new(ctx.inputs[2].shape(), gb)),
                ]
            }),
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.custom(
            &[a],
            out,
            Box::new(|ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    /// 1-D convolution over time with "same" zero padding.
    ///
    /// `x` is `T×C_in` (time-major), `weight` is `(kernel·C_in)×C_out` with
    /// rows ordered tap-major, `bias` has length `C_out`. Output is `T×C_out`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, kernel: usize, dilation: usize) -> Var {
        let xv = self.value(x);
        let (t, cin) = (xv.rows(), xv.cols());
        let wv = self.value(weight);
        assert_eq!(wv.rows(), kernel * cin, "conv1d weight rows must be kernel*C_in");
        let cout = wv.cols();
        let col = im2col(xv, kernel, dilation);
        let mut out = vec![0.0; t * cout];
        gemm(t, kernel * cin, cout, col.data(), false, wv.data(), false, &mut out, 0.0);
        let mut out = Tensor::matrix(t, cout, out);
        let bv = self.value(bias).data();
        for r in 0..t {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.custom(
            &[x, weight, bias],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let w = ctx.inputs[1];
                let gx = ctx.needs[0].then(|| {
                    let mut gcol = vec![0.0; t * kernel * cin];
                    gemm(t, cout, kernel * cin, g.data(), false, w.data(), true, &mut gcol, 0.0);
                    col2im(&gcol, t, cin, kernel, dilation)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; kernel * cin * cout];
                    gemm(kernel * cin, t, cout, col.data(), true, g.data(), false, &mut gw, 0.0);
                    Tensor::matrix(kernel * cin, cout, gw)
                });
                let gb = ctx.needs[2].then(|| {
                    let mut acc = vec![0.0; cout];
                    for r in 0..t {
                        for (s, x) in acc.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    Tensor::new(ctx.inputs[2].shape(), acc)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Mean cross-entropy of row-wise logits against `targets`, weighted per row.
    ///
    /// Rows with zero weight do not contribute; the result is normalized by the
    /// total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let rows = lv.rows();
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let total: f64 = weights.iter().sum();
        let norm = if total > 0.0 { 1.0 / total } else { 0.0 };
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(row);
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.custom(
            &[logits],
            Tensor::scalar(loss * norm),
            Box::new(move |ctx| {
                let s = ctx.grad.item() * norm;
                let mut gl = probs.clone();
                for r in 0..rows {
                    let w = weights[r] * s;
                    let row = gl.row_mut(r);
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= w);
                }
                vec![Some(gl)]
            }),
        )
    }

    /// Weighted mean binary cross-entropy on logits (any shape) against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        assert_eq!(lv.len(), weights.len());
        let total: f64 = weights.iter().sum();
        let norm = if total > 0.0 { 1.0 / total } else { 0.0 };
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.custom(
            &[logits],
            Tensor::scalar(loss * norm),
            Box::new(move |ctx| {
                let s = ctx.grad.item() * norm;
                let d = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&targets)
                    .zip(&weights)
                    .map(|((&x, &y), &w)| s * w * (sigmoid(x) - y))
                    .collect();
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    /// Identity in the forward pass, gradient blocked.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn im2col(x: &Tensor, kernel: usize, dilation: usize) -> Tensor {
    let (t, cin) = (x.rows(), x.cols());
    let half = (kernel - 1) / 2 * dilation;
    let mut col = vec![0.0; t * kernel * cin];
    for r in 0..t {
        let dst = &mut col[r * kernel * cin..(r + 1) * kernel * cin];
        for k in 0..kernel {
            let src = r as isize + (k * dilation) as isize - half as isize;
            if src >= 0 && (src as usize) < t {
                dst[k * cin..(k + 1) * cin].copy_from_slice(x.row(src as usize));
            }
        }
    }
    Tensor::matrix(t, kernel * cin, col)
}

fn col2im(gcol: &[f64], t: usize, cin: usize, kernel: usize, dilation: usize) -> Tensor {
    let half = (kernel - 1) / 2 * dilation;
    let mut gx = Tensor::zeros(&[t, cin]);
    for r in 0..t {
        let src = &gcol[r * kernel * cin..(r + 1) * kernel * cin];
        for k in 0..kernel {
            let dst = r as isize + (k * dilation) as isize - half as isize;
            if dst >= 0 && (dst as usize) < t {
                for (a, b) in gx.row_mut(dst as usize).iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                    *a += b;
                }
            }
        }
    }
    gx
}
