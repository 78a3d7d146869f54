//! Frame-synchronous convolutional residual networks.
//!
//! Layout: input conv, `len(dilations)` blocks of `h + conv(leaky(LN(h)))`, then a
//! pointwise output conv. No pooling, so the output has one row per input frame.

use autograd::{Graph, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEAKY_SLOPE: f64 = 0.2;
const LN_EPS: f64 = 1e-5;
/// Floor inside the log-magnitude features.
pub const FEATURE_FLOOR: f64 = 1e-4;
const FEATURE_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

pub type EncoderConfig = ConvNetConfig;
pub type DecoderConfig = ConvNetConfig;

impl ConvNetConfig {
    pub fn encoder_default() -> Self {
        Self { hidden: 128, kernel: 3, dilations: vec![1, 1, 1] }
    }

    pub fn decoder_default() -> Self {
        Self { hidden: 128, kernel: 3, dilations: vec![1, 2, 1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.kernel == 0 || self.kernel.is_multiple_of(2) || self.dilations.contains(&0) {
            return Err(Error::Config(format!("invalid conv net {self:?}: kernel must be odd, sizes positive")));
        }
        Ok(())
    }

    /// Frames on either side that can influence one output frame.
    pub fn receptive_radius(&self) -> usize {
        let half = self.kernel / 2;
        half + self.dilations.iter().map(|d| half * d).sum::<usize>()
    }
}

/// A conv net bound to a parameter namespace and fixed input/output widths.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvResNet {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub config: ConvNetConfig,
}

impl ConvResNet {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize, config: ConvNetConfig) -> Self {
        Self { prefix: prefix.into(), input, output, config }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Adds freshly initialized parameters to `store`. `output_bias` seeds the
    /// final layer's bias.
    pub fn init(&self, store: &mut ParamStore, output_bias: f64, rng: &mut impl Rng) {
        let (h, k) = (self.config.hidden, self.config.kernel);
        store.init_normal(&self.name("in.w"), &[k * self.input, h], (1.0 / (k * self.input) as f64).sqrt(), rng);
        store.init_const(&self.name("in.b"), &[h], 0.0);
        for i in 0..self.config.dilations.len() {
            store.init_const(&self.name(&format!("block{i}.ln.g")), &[h], 1.0);
            store.init_const(&self.name(&format!("block{i}.ln.b")), &[h], 0.0);
            store.init_normal(&self.name(&format!("block{i}.conv.w")), &[k * h, h], 0.5 / ((k * h) as f64).sqrt(), rng);
            store.init_const(&self.name(&format!("block{i}.conv.b")), &[h], 0.0);
        }
        store.init_normal(&self.name("out.w"), &[h, self.output], 0.1 / (h as f64).sqrt(), rng);
        store.init_const(&self.name("out.b"), &[self.output], output_bias);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::ShapeMismatch(format!("{} expects T×{}, got {shape:?}", self.prefix, self.input)));
        }
        let k = self.config.kernel;
        let w = g.param(store, &self.name("in.w"));
        let b = g.param(store, &self.name("in.b"));
        let mut h = g.conv1d(x, w, b, k, 1);
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let lg = g.param(store, &self.name(&format!("block{i}.ln.g")));
            let lb = g.param(store, &self.name(&format!("block{i}.ln.b")));
            let cw = g.param(store, &self.name(&format!("block{i}.conv.w")));
            let cb = g.param(store, &self.name(&format!("block{i}.conv.b")));
            let n = g.layer_norm(h, lg, lb, LN_EPS);
            let a = g.leaky_relu(n, LEAKY_SLOPE);
            let c = g.conv1d(a, cw, cb, k, d);
            h = g.add(h, c);
        }
        let a = g.leaky_relu(h, LEAKY_SLOPE);
        let w = g.param(store, &self.name("out.w"));
        let b = g.param(store, &self.name("out.b"));
        Ok(g.conv1d(a, w, b, 1, 1))
    }
}

/// Scaled log-magnitude features fed to every network.
pub fn log_features(g: &mut Graph, magnitude: Var) -> Var {
    let m = g.add_scalar(magnitude, FEATURE_FLOOR);
    let l = g.ln(m);
    g.scale(l, FEATURE_SCALE)
}
