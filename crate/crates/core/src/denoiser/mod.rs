//! The restoration network: frequency split, three branch denoisers and a
//! learned fusion.

mod attention;
mod fhd;
mod layers;
mod ldf;
mod unet;

pub use attention::{
    dilated_attention, feed_forward, mhda_block, mhsa, mhsa_block, mhsa_sublayer,
    multi_head_attention, ssla, ssla_sublayer,
};
pub use fhd::{fhd_forward, positional_encoding, AttentionKind, FhdConfig};
pub use layers::sinusoidal_embedding;
pub use ldf::{ldf_fuse, LdfConfig};
pub use unet::{unet_forward, UnetConfig};

use serde::{Deserialize, Serialize};
use sinodiff_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::frequency::{decompose, FrequencyTriple};
use crate::geometry::Sinogram;
use layers::Specs;

/// Which branch networks run. A disabled branch passes its band through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Branches {
    pub fhd: bool,
    pub fld: bool,
    pub ffd: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches {
            fhd: true,
            fld: true,
            ffd: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned convolutional fusion of all three branches.
    #[default]
    Ldf,
    /// Plain sum of the low- and high-band outputs.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Gaussian mask bandwidth in normalised cycles.
    pub sigma: f64,
    pub fhd: FhdConfig,
    /// Shared by the low- and full-frequency branches.
    pub unet: UnetConfig,
    pub ldf: LdfConfig,
    pub branches: Branches,
    pub fusion: Fusion,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            sigma: 0.08,
            fhd: FhdConfig::default(),
            unet: UnetConfig::default(),
            ldf: LdfConfig::default(),
            branches: Branches::default(),
            fusion: Fusion::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::validation(
                "denoiser.sigma",
                format!("must be positive, got {}", self.sigma),
            ));
        }
        self.fhd.validate("denoiser.fhd")?;
        self.unet.validate("denoiser.unet")?;
        self.ldf.validate("denoiser.ldf")
    }

    /// Check that `(rows, cols)` inputs fit the patching and pooling.
    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let p = self.fhd.patch_size;
        let f = 1usize << self.unet.depth;
        if rows % p != 0 || cols % p != 0 || rows % f != 0 || cols % f != 0 {
            return Err(Error::shape(
                "denoise",
                format!("{rows}x{cols} input needs multiples of {p} (patches) and {f} (pooling)"),
            ));
        }
        Ok(())
    }
}

/// Freshly initialised parameters for every branch, independent of which
/// branches are enabled.
pub fn init_params(cfg: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut specs = Specs::default();
    fhd::specs(&cfg.fhd, &mut specs);
    unet::specs("fld", &cfg.unet, &mut specs);
    unet::specs("ffd", &cfg.unet, &mut specs);
    ldf::specs(&cfg.ldf, &mut specs);
    let mut store = specs.build(seed);
    ldf::identity_init(&cfg.ldf, &mut store);
    Ok(store)
}

/// Expected parameter names and shapes.
pub fn param_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Specs::default();
    fhd::specs(&cfg.fhd, &mut specs);
    unet::specs("fld", &cfg.unet, &mut specs);
    unet::specs("ffd", &cfg.unet, &mut specs);
    ldf::specs(&cfg.ldf, &mut specs);
    specs.0.into_iter().map(|s| (s.name, s.shape)).collect()
}

pub(crate) fn sino_input(g: &mut Graph, s: &Sinogram) -> Result<Var> {
    let (v, d) = s.shape();
    Ok(g.input(Tensor::new(vec![v, d], s.values().to_vec())?))
}

/// Build the restoration graph for already-split bands.
pub fn forward_bands(
    g: &mut Graph,
    store: &ParamStore,
    bands: &FrequencyTriple,
    t: usize,
    cfg: &DenoiserConfig,
) -> Result<Var> {
    let (rows, cols) = bands.full.shape();
    cfg.check_input(rows, cols)?;
    let gh = sino_input(g, &bands.high)?;
    let gl = sino_input(g, &bands.low)?;
    let gf = sino_input(g, &bands.full)?;
    let b = cfg.branches;
    let high = if b.fhd { fhd_forward(g, store, gh, t, &cfg.fhd)? } else { gh };
    let low = if b.fld { unet_forward(g, store, "fld", gl, t, &cfg.unet)? } else { gl };
    if cfg.fusion == Fusion::Sum {
        return Ok(g.add(low, high)?);
    }
    if b.ffd && !b.fhd && !b.fld {
        return unet_forward(g, store, "ffd", gf, t, &cfg.unet);
    }
    let full = if b.ffd { unet_forward(g, store, "ffd", gf, t, &cfg.unet)? } else { gf };
    ldf_fuse(g, store, high, low, full, &cfg.ldf)
}

/// Build the restoration graph for `x_t`; returns the `[V, D]` estimate of
/// the clean sinogram.
pub fn forward(g: &mut Graph, store: &ParamStore, x_t: &Sinogram, t: usize, cfg: &DenoiserConfig) -> Result<Var> {
    let bands = decompose(x_t, cfg.sigma)?;
    forward_bands(g, store, &bands, t, cfg)
}

/// Inference-only restoration of `x_t`.
pub fn denoise(x_t: &Sinogram, t: usize, store: &ParamStore, cfg: &DenoiserConfig) -> Result<Sinogram> {
    let mut g = Graph::new();
    g.set_check_finite(false);
    let out = forward(&mut g, store, x_t, t, cfg)?;
    let (v, d) = x_t.shape();
    Ok(Sinogram::from_raw(v, d, g.value(out).data().to_vec()))
}
