//! Convolutional fusion of the three branch outputs.

use serde::{Deserialize, Serialize};
use sinodiff_autograd::{Graph, ParamStore, Var};

use super::layers::{conv, Specs, GAIN_LINEAR, GAIN_RELU};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdfConfig {
    pub hidden_channels: usize,
    pub n_layers: usize,
    pub kernel_size: usize,
}

impl Default for LdfConfig {
    fn default() -> Self {
        LdfConfig {
            hidden_channels: 32,
            n_layers: 3,
            kernel_size: 3,
        }
    }
}

impl LdfConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::validation(format!("{prefix}.n_layers"), "must be at least 2"));
        }
        if self.hidden_channels < 2 {
            return Err(Error::validation(
                format!("{prefix}.hidden_channels"),
                "must be at least 2",
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::validation(format!("{prefix}.kernel_size"), "must be odd"));
        }
        Ok(())
    }
}

pub(crate) fn specs(cfg: &LdfConfig, specs: &mut Specs) {
    let (h, k) = (cfg.hidden_channels, cfg.kernel_size);
    for i in 0..cfg.n_layers {
        let cin = if i == 0 { 3 } else { h };
        if i + 1 == cfg.n_layers {
            specs.conv(&format!("ldf.c{i}"), cin, 1, k, GAIN_LINEAR);
        } else {
            specs.conv(&format!("ldf.c{i}"), cin, h, k, GAIN_RELU);
        }
    }
}

/// Start the fusion at `(H + L + F) / 2`: hidden channels 0 and 1 carry the
/// positive and negative parts through the rectifiers and the last layer
/// recombines them. The remaining channels keep their random weights but
/// feed the output through zeros.
pub(crate) fn identity_init(cfg: &LdfConfig, store: &mut ParamStore) {
    let (h, k) = (cfg.hidden_channels, cfg.kernel_size);
    let centre = (k / 2) * k + k / 2;
    let kk = k * k;
    for i in 0..cfg.n_layers {
        let cin = if i == 0 { 3 } else { h };
        let last = i + 1 == cfg.n_layers;
        let w = store
            .get_mut(&format!("ldf.c{i}.w"))
            .expect("ldf weights registered")
            .data_mut();
        let rows = if last { 1 } else { 2 };
        for o in 0..rows {
            w[o * cin * kk..(o + 1) * cin * kk].fill(0.0);
        }
        if i == 0 {
            for c in 0..3 {
                w[c * kk + centre] = 0.5;
                w[cin * kk + c * kk + centre] = -0.5;
            }
        } else if !last {
            w[centre] = 1.0;
            w[cin * kk + kk + centre] = 1.0;
        } else {
            w[centre] = 1.0;
            w[kk + centre] = -1.0;
        }
    }
}

/// Channel-stack `(H, L, F)` (each `[V, D]`) and run the conv stack.
pub fn ldf_fuse(g: &mut Graph, store: &ParamStore, high: Var, low: Var, full: Var, cfg: &LdfConfig) -> Result<Var> {
    let shape = g.shape(high).to_vec();
    if shape.len() != 2 || g.shape(low) != shape.as_slice() || g.shape(full) != shape.as_slice() {
        return Err(Error::shape(
            "ldf_fuse",
            format!("{:?}, {:?}, {:?}", shape, g.shape(low), g.shape(full)),
        ));
    }
    let planes = [high, low, full]
        .iter()
        .map(|&v| g.reshape(v, &[1, shape[0], shape[1]]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut x = g.concat(&planes, 0)?;
    for i in 0..cfg.n_layers {
        x = conv(g, store, x, &format!("ldf.c{i}"))?;
        if i + 1 < cfg.n_layers {
            x = g.relu(x)?;
        }
    }
    Ok(g.reshape(x, &shape)?)
}
