//! High-frequency transformer branch.

use serde::{Deserialize, Serialize};
use sinodiff_autograd::{Graph, ParamStore, Tensor, Var};

use super::attention::{block_specs, mhda_block, mhsa_block};
use super::layers::{linear, time_mlp, time_mlp_specs, Specs, GAIN_LINEAR, LN_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Mhsa,
    Mhda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FhdConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub module_layout: Vec<AttentionKind>,
    pub window: usize,
    pub dilations: Vec<usize>,
    /// 1-based `(source, target)` module pairs.
    pub skip_links: Vec<[usize; 2]>,
    pub time_embedding_dim: usize,
    pub ffn_ratio: usize,
}

impl Default for FhdConfig {
    fn default() -> Self {
        use AttentionKind::{Mhda, Mhsa};
        FhdConfig {
            patch_size: 4,
            embed_dim: 48,
            n_heads: 6,
            module_layout: vec![Mhsa, Mhda, Mhda, Mhsa, Mhsa, Mhsa, Mhda, Mhda, Mhsa, Mhsa],
            window: 3,
            dilations: vec![1, 2, 3],
            skip_links: vec![[1, 10], [2, 9], [3, 8], [4, 7]],
            time_embedding_dim: 32,
            ffn_ratio: 4,
        }
    }
}

impl FhdConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        let positive = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("time_embedding_dim", self.time_embedding_dim),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(field(name), "must be at least 1"));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::validation(
                field("n_heads"),
                format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.n_heads),
            ));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::validation(
                field("embed_dim"),
                "must be a multiple of 4 for the 2-D positional encoding",
            ));
        }
        if self.module_layout.is_empty() {
            return Err(Error::validation(field("module_layout"), "must not be empty"));
        }
        if self.window % 2 == 0 {
            return Err(Error::validation(field("window"), "must be odd"));
        }
        if self.module_layout.contains(&AttentionKind::Mhda) {
            if self.dilations.is_empty() || self.dilations.contains(&0) {
                return Err(Error::validation(field("dilations"), "rates must be at least 1"));
            }
            if self.n_heads % self.dilations.len() != 0 {
                return Err(Error::validation(
                    field("n_heads"),
                    format!(
                        "{} heads cannot be split across {} dilation rates",
                        self.n_heads,
                        self.dilations.len()
                    ),
                ));
            }
        }
        let n = self.module_layout.len();
        let mut targets = vec![false; n + 1];
        for &[s, t] in &self.skip_links {
            if s == 0 || t > n || s >= t || std::mem::replace(&mut targets[t], true) {
                return Err(Error::validation(
                    field("skip_links"),
                    format!("invalid link ({s}, {t}) for {n} modules"),
                ));
            }
        }
        Ok(())
    }

    fn skip_source(&self, target: usize) -> Option<usize> {
        self.skip_links.iter().find(|l| l[1] == target).map(|l| l[0])
    }
}

pub(crate) fn specs(cfg: &FhdConfig, specs: &mut Specs) {
    let d = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    specs.linear("fhd.embed", p2, d, GAIN_LINEAR);
    time_mlp_specs(specs, "fhd.time", cfg.time_embedding_dim, d);
    for j in 1..=cfg.module_layout.len() {
        if cfg.skip_source(j).is_some() {
            specs.linear(&format!("fhd.skip{j}"), 2 * d, d, GAIN_LINEAR);
        }
        block_specs(specs, &format!("fhd.m{j}"), d, cfg.ffn_ratio);
    }
    specs.linear("fhd.head", d, p2, 0.0); // starts as the identity
}

/// Fixed 2-D sinusoidal position code `[h*w, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = vec![0.0; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let row = &mut out[(r * w + c) * dim..(r * w + c + 1) * dim];
            for i in 0..quarter {
                let freq = (-(10000f64.ln()) * i as f64 / quarter as f64).exp();
                row[i] = (r as f64 * freq).sin();
                row[quarter + i] = (r as f64 * freq).cos();
                row[2 * quarter + i] = (c as f64 * freq).sin();
                row[3 * quarter + i] = (c as f64 * freq).cos();
            }
        }
    }
    out
}

/// For each token and in-patch offset, the flat source index in the
/// `rows x cols` map.
fn patch_index(rows: usize, cols: usize, p: usize) -> Vec<Option<usize>> {
    let (gh, gw) = (rows / p, cols / p);
    let mut idx = Vec::with_capacity(rows * cols);
    for i in 0..gh {
        for j in 0..gw {
            for a in 0..p {
                for b in 0..p {
                    idx.push(Some((i * p + a) * cols + j * p + b));
                }
            }
        }
    }
    idx
}

fn inverse(index: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut inv = vec![None; index.len()];
    for (k, i) in index.iter().enumerate() {
        inv[i.expect("patch index is total")] = Some(k);
    }
    inv
}

/// Denoise the high band `gh` (`[V, D]`) at step `t`. Returns `gh` plus the
/// predicted correction.
pub fn fhd_forward(g: &mut Graph, store: &ParamStore, gh: Var, t: usize, cfg: &FhdConfig) -> Result<Var> {
    let shape = g.shape(gh).to_vec();
    let p = cfg.patch_size;
    if shape.len() != 2 || shape[0] % p != 0 || shape[1] % p != 0 {
        return Err(Error::shape(
            "fhd_forward",
            format!("{shape:?} is not divisible into {p}x{p} patches"),
        ));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let grid = (rows / p, cols / p);
    let n_tokens = grid.0 * grid.1;
    let d = cfg.embed_dim;

    let index = patch_index(rows, cols, p);
    let patches = g.gather(gh, &index, vec![n_tokens, p * p])?;
    let tokens = linear(g, store, patches, "fhd.embed")?;
    let pos = g.input(Tensor::new(vec![n_tokens, d], positional_encoding(grid.0, grid.1, d))?);
    let mut x = g.add(tokens, pos)?;
    let temb = time_mlp(g, store, "fhd.time", t, cfg.time_embedding_dim)?;

    let mut outputs: Vec<Var> = Vec::with_capacity(cfg.module_layout.len());
    for (j0, kind) in cfg.module_layout.iter().enumerate() {
        let j = j0 + 1;
        if let Some(src) = cfg.skip_source(j) {
            let cat = g.concat(&[x, outputs[src - 1]], 1)?;
            x = linear(g, store, cat, &format!("fhd.skip{j}"))?;
        }
        let name = format!("fhd.m{j}");
        x = match kind {
            AttentionKind::Mhsa => mhsa_block(g, store, &name, x, Some(temb), cfg.n_heads)?,
            AttentionKind::Mhda => mhda_block(
                g,
                store,
                &name,
                x,
                grid,
                Some(temb),
                cfg.n_heads,
                cfg.window,
                &cfg.dilations,
            )?,
        };
        outputs.push(x);
    }

    let x = g.layer_norm(x, LN_EPS)?;
    let out = linear(g, store, x, "fhd.head")?;
    let out = g.gather(out, &inverse(&index), vec![rows, cols])?;
    Ok(g.add(gh, out)?)
}
