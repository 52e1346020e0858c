//! Global and dilated sliding-window multi-head attention.

use sinodiff_autograd::{Graph, ParamStore, Var};

use super::layers::{linear, Specs, GAIN_LINEAR, GAIN_RELU, LN_EPS};
use crate::error::{Error, Result};

/// Parameters of one attention module plus its feed-forward sublayer.
pub(crate) fn block_specs(specs: &mut Specs, name: &str, dim: usize, ffn_ratio: usize) {
    for part in ["q", "k", "v", "o"] {
        specs.linear(&format!("{name}.{part}"), dim, dim, GAIN_LINEAR);
    }
    specs.linear(&format!("{name}.ffn1"), dim, ffn_ratio * dim, GAIN_RELU);
    specs.linear(&format!("{name}.ffn2"), ffn_ratio * dim, dim, GAIN_LINEAR);
}

fn head_dim(op: &'static str, dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::validation(
            "n_heads",
            format!("{op}: embedding width {dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(dim / heads)
}

fn qkv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<(Var, Var, Var)> {
    Ok((
        linear(g, store, x, &format!("{name}.q"))?,
        linear(g, store, x, &format!("{name}.k"))?,
        linear(g, store, x, &format!("{name}.v"))?,
    ))
}

/// Softmax attention of every token over every token, before the
/// residual. `x` is `[N, D]`. Per-head attention matrices are pushed to
/// `weights` when given.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    heads: usize,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let dim = g.shape(x)[1];
    let dh = head_dim("mhsa", dim, heads)?;
    let (q, k, v) = qkv(g, store, name, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let logits = g.matmul_ex(qh, kh, true)?;
        let logits = g.scale(logits, scale)?;
        let a = g.softmax(logits)?;
        if let Some(w) = weights.as_deref_mut() {
            w.push(a);
        }
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat(&outs, 1)?;
    linear(g, store, cat, &format!("{name}.o"))
}

/// Sliding sparse local attention on an `h x w` grid of tokens `[h*w, D]`,
/// before the residual. Heads are split evenly across `dilations`; each
/// query attends to the in-bounds taps of its `window x window` dilated
/// neighbourhood. Per-head weights `[h*w, window^2]` go to `weights`.
#[allow(clippy::too_many_arguments)]
pub fn dilated_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    grid: (usize, usize),
    heads: usize,
    window: usize,
    dilations: &[usize],
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (h, w) = grid;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::shape(
            "dilated_attention",
            format!("{shape:?} for a {h}x{w} grid"),
        ));
    }
    let dim = shape[1];
    let dh = head_dim("mhda", dim, heads)?;
    if dilations.is_empty() || heads % dilations.len() != 0 {
        return Err(Error::validation(
            "dilations",
            format!(
                "{heads} heads cannot be split across {} dilation rates",
                dilations.len()
            ),
        ));
    }
    if window % 2 == 0 {
        return Err(Error::domain("ssla", format!("window must be odd, got {window}")));
    }
    let per_rate = heads / dilations.len();
    let (q, k, v) = qkv(g, store, name, x)?;
    let k3 = g.reshape(k, &[h, w, dim])?;
    let v3 = g.reshape(v, &[h, w, dim])?;
    let taps = window * window;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for (group, &rate) in dilations.iter().enumerate() {
        let (ku, mask) = g.unfold(k3, window, rate)?;
        let (vu, _) = g.unfold(v3, window, rate)?;
        for head in group * per_rate..(group + 1) * per_rate {
            let qh = g.narrow(q, 1, head * dh, dh)?;
            let qh = g.reshape(qh, &[h * w, 1, dh])?;
            let kh = g.narrow(ku, 2, head * dh, dh)?;
            let vh = g.narrow(vu, 2, head * dh, dh)?;
            let logits = g.matmul_ex(qh, kh, true)?;
            let logits = g.reshape(logits, &[h * w, taps])?;
            let logits = g.scale(logits, scale)?;
            let a = g.masked_softmax(logits, Some(&mask))?;
            if let Some(wt) = weights.as_deref_mut() {
                wt.push(a);
            }
            let a3 = g.reshape(a, &[h * w, 1, taps])?;
            let o = g.matmul(a3, vh)?;
            outs.push(g.reshape(o, &[h * w, dh])?);
        }
    }
    let cat = g.concat(&outs, 1)?;
    linear(g, store, cat, &format!("{name}.o"))
}

/// `x + multi_head_attention(x)`.
pub fn mhsa(g: &mut Graph, store: &ParamStore, name: &str, x: Var, heads: usize) -> Result<Var> {
    let a = multi_head_attention(g, store, name, x, heads, None)?;
    Ok(g.add(x, a)?)
}

/// `x + dilated_attention(x)` with a single dilation rate.
#[allow(clippy::too_many_arguments)]
pub fn ssla(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    grid: (usize, usize),
    heads: usize,
    window: usize,
    dilation: usize,
) -> Result<Var> {
    let a = dilated_attention(g, store, name, x, grid, heads, window, &[dilation], None)?;
    Ok(g.add(x, a)?)
}

/// `x + W2 gelu(W1 LN(x))`, applied per token.
pub fn feed_forward(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let h = linear(g, store, n, &format!("{name}.ffn1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, store, h, &format!("{name}.ffn2"))?;
    Ok(g.add(x, h)?)
}

/// Pre-norm global attention with the time token appended to the sequence
/// for the attention step only. No feed-forward.
pub fn mhsa_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    time_token: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let n_tokens = g.shape(x)[0];
    let seq = match time_token {
        Some(t) => g.concat(&[x, t], 0)?,
        None => x,
    };
    let normed = g.layer_norm(seq, LN_EPS)?;
    let a = multi_head_attention(g, store, name, normed, heads, None)?;
    let y = g.add(seq, a)?;
    if time_token.is_some() {
        Ok(g.narrow(y, 0, 0, n_tokens)?)
    } else {
        Ok(y)
    }
}

/// Pre-norm dilated attention with the time vector `[1, D]` added to the
/// normalised tokens. No feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn ssla_sublayer(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    grid: (usize, usize),
    time_bias: Option<Var>,
    heads: usize,
    window: usize,
    dilations: &[usize],
) -> Result<Var> {
    let mut normed = g.layer_norm(x, LN_EPS)?;
    if let Some(t) = time_bias {
        let dim = g.shape(t)[1];
        let row = g.reshape(t, &[dim])?;
        normed = g.add_row(normed, row)?;
    }
    let a = dilated_attention(g, store, name, normed, grid, heads, window, dilations, None)?;
    Ok(g.add(x, a)?)
}

/// Global attention module: attention sublayer then feed-forward.
pub fn mhsa_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    time_token: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let y = mhsa_sublayer(g, store, name, x, time_token, heads)?;
    feed_forward(g, store, name, y)
}

/// Multi-head dilated attention module: heads partitioned across the
/// dilation rates, then feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn mhda_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    grid: (usize, usize),
    time_bias: Option<Var>,
    heads: usize,
    window: usize,
    dilations: &[usize],
) -> Result<Var> {
    let y = ssla_sublayer(g, store, name, x, grid, time_bias, heads, window, dilations)?;
    feed_forward(g, store, name, y)
}
