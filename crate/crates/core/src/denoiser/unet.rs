//! Time-conditioned U-Net used by the low- and full-frequency branches.

use serde::{Deserialize, Serialize};
use sinodiff_autograd::{Graph, ParamStore, Var};

use super::layers::{conv, linear, time_mlp, time_mlp_specs, Specs, GAIN_LINEAR, GAIN_RELU};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub time_embedding_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            depth: 2,
            base_channels: 16,
            time_embedding_dim: 32,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("depth", self.depth),
            ("base_channels", self.base_channels),
            ("time_embedding_dim", self.time_embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{prefix}.{name}"), "must be at least 1"));
            }
        }
        if self.depth > 8 {
            return Err(Error::validation(format!("{prefix}.depth"), "must be at most 8"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

fn block_specs(specs: &mut Specs, name: &str, cin: usize, cout: usize, temb: usize) {
    specs.conv(&format!("{name}.c1"), cin, cout, 3, GAIN_RELU);
    specs.linear(&format!("{name}.t"), temb, cout, GAIN_LINEAR);
    specs.conv(&format!("{name}.c2"), cout, cout, 3, GAIN_RELU);
}

pub(crate) fn specs(prefix: &str, cfg: &UnetConfig, specs: &mut Specs) {
    let e = cfg.time_embedding_dim;
    time_mlp_specs(specs, &format!("{prefix}.time"), e, e);
    specs.conv(&format!("{prefix}.inc"), 1, cfg.base_channels, 3, GAIN_LINEAR);
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.base_channels } else { cfg.channels(l - 1) };
        block_specs(specs, &format!("{prefix}.enc{l}"), cin, cfg.channels(l), e);
    }
    block_specs(
        specs,
        &format!("{prefix}.mid"),
        cfg.channels(cfg.depth - 1),
        cfg.channels(cfg.depth),
        e,
    );
    for l in (0..cfg.depth).rev() {
        let cin = cfg.channels(l + 1) + cfg.channels(l);
        block_specs(specs, &format!("{prefix}.dec{l}"), cin, cfg.channels(l), e);
    }
    specs.conv(&format!("{prefix}.out"), cfg.base_channels, 1, 1, 0.0); // starts as the identity
}

fn block(g: &mut Graph, store: &ParamStore, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = conv(g, store, x, &format!("{name}.c1"))?;
    let bias = linear(g, store, temb, &format!("{name}.t"))?;
    let c = g.shape(bias)[1];
    let bias = g.reshape(bias, &[c])?;
    let h = g.add_channel(h, bias)?;
    let h = g.gelu(h)?;
    let h = conv(g, store, h, &format!("{name}.c2"))?;
    Ok(g.gelu(h)?)
}

/// `x` is `[V, D]`; returns `x` plus the network output, same shape.
pub fn unet_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    t: usize,
    cfg: &UnetConfig,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let factor = 1usize << cfg.depth;
    if shape.len() != 2 || shape[0] % factor != 0 || shape[1] % factor != 0 {
        return Err(Error::shape(
            "unet_forward",
            format!("{shape:?} is not divisible by 2^{}", cfg.depth),
        ));
    }
    let temb = time_mlp(g, store, &format!("{prefix}.time"), t, cfg.time_embedding_dim)?;
    let input = g.reshape(x, &[1, shape[0], shape[1]])?;
    let mut h = conv(g, store, input, &format!("{prefix}.inc"))?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        h = block(g, store, &format!("{prefix}.enc{l}"), h, temb)?;
        skips.push(h);
        h = g.avg_pool2(h)?;
    }
    h = block(g, store, &format!("{prefix}.mid"), h, temb)?;
    for l in (0..cfg.depth).rev() {
        h = g.upsample2(h)?;
        h = g.concat(&[h, skips[l]], 0)?;
        h = block(g, store, &format!("{prefix}.dec{l}"), h, temb)?;
    }
    let out = conv(g, store, h, &format!("{prefix}.out"))?;
    let out = g.reshape(out, &shape)?;
    Ok(g.add(x, out)?)
}
