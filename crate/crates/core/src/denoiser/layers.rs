use sinodiff_autograd::{init_uniform, Graph, ParamStore, Tensor, Var};

use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// How a parameter tensor starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    /// `U(+-gain / sqrt(fan_in))`
    Uniform { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Unit-variance preserving gain for a uniform draw.
pub(crate) const GAIN_LINEAR: f64 = 1.732_050_807_568_877_2;
/// Kaiming gain for layers followed by a rectifier.
pub(crate) const GAIN_RELU: f64 = 2.449_489_742_783_178;

#[derive(Debug, Default)]
pub(crate) struct Specs(pub Vec<ParamSpec>);

impl Specs {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fan_in, fan_out],
            init: Init::Uniform { fan_in, gain },
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![fan_out],
            init: Init::Zeros,
        });
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let fan_in = cin * k * k;
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k],
            init: Init::Uniform { fan_in, gain },
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }

    pub fn build(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in &self.0 {
            let t = match spec.init {
                Init::Zeros | Init::Uniform { gain: 0.0, .. } => Tensor::zeros(&spec.shape),
                Init::Uniform { fan_in, gain } => init_uniform(seed, &spec.name, &spec.shape, fan_in, gain),
            };
            store.insert(spec.name.clone(), t);
        }
        store
    }
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b)?)
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.conv2d(x, w)?;
    Ok(g.add_channel(y, b)?)
}

/// `[sin(t w_i), cos(t w_i)]` with `w_i = 10000^(-i/(dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

pub(crate) fn time_mlp_specs(specs: &mut Specs, name: &str, dim: usize, out: usize) {
    specs.linear(&format!("{name}.l1"), dim, out, GAIN_RELU);
    specs.linear(&format!("{name}.l2"), out, out, GAIN_LINEAR);
}

/// Sinusoid of `t` through a two-layer GELU MLP; returns `[1, out]`.
pub(crate) fn time_mlp(g: &mut Graph, store: &ParamStore, name: &str, t: usize, dim: usize) -> Result<Var> {
    let e = g.input(Tensor::new(vec![1, dim], sinusoidal_embedding(t as f64, dim))?);
    let h = linear(g, store, e, &format!("{name}.l1"))?;
    let h = g.gelu(h)?;
    linear(g, store, h, &format!("{name}.l2"))
}
