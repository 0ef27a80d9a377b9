//! Graph-building functions for the encoder, transformer and decoder.

use super::{resolution_encoding, rope_tables, ModelConfig, TokenKind};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Encoder output for a batch of patches.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[N, d]` token embeddings.
    pub tokens: Var,
    /// `[N, c2, p, p]` features passed to the decoder.
    pub skips: Var,
}

fn linear(g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

fn conv(g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.conv2d(x, w, bias)
}

/// Encodes `input: [N, 2, p, p]` (image channel, label channel) at working
/// resolution `resolution`.
pub fn encode_patches(g: &mut Graph, b: &Bound, cfg: &ModelConfig, input: Tensor, resolution: usize) -> Result<Encoded> {
    let shape = input.shape().to_vec();
    let (n, h, w) = match shape.as_slice() {
        [n, 2, h, w] => (*n, *h, *w),
        _ => {
            return Err(Error::InvalidShape {
                shape,
                reason: "encoder input must be [N, 2, p, p]".into(),
            })
        }
    };
    let c2 = cfg.enc_channels[1];
    let x = g.constant(input);
    let h1 = conv(g, b, x, "enc.conv1")?;
    let h1 = g.gelu(h1)?;
    let h2 = conv(g, b, h1, "enc.conv2")?;
    let skips = g.gelu(h2)?;
    let flat = g.reshape(skips, &[n, c2, h * w])?;
    let pooled = g.mean_axis(flat, 2)?;
    let tokens = linear(g, b, pooled, "enc.proj")?;
    let res = g.constant(Tensor::new(vec![cfg.d], resolution_encoding(resolution, cfg.d)?)?);
    let tokens = g.add(tokens, res)?;
    Ok(Encoded { tokens, skips })
}

fn one_hot(kinds: &[TokenKind]) -> Tensor {
    Tensor::from_fn(&[kinds.len(), TokenKind::COUNT], |i| {
        (kinds[i / TokenKind::COUNT].index() == i % TokenKind::COUNT) as u8 as f64
    })
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[t, heads, d / heads])?;
    g.permute(r, &[1, 0, 2])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let (h, t, dh) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let p = g.permute(x, &[1, 0, 2])?;
    g.reshape(p, &[t, h * dh])
}

/// Multi-head attention of normalised queries `hq: [Tq, d]` over keys and
/// values `hk: [Tk, d]`, with rotary positions applied to queries and keys.
/// Parameters come from `blk{layer}.w{q,k,v,o}`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    hq: Var,
    hk: Var,
    q_coords: &[(f64, f64)],
    k_coords: &[(f64, f64)],
) -> Result<Var> {
    let pre = format!("blk{layer}.");
    let dh = cfg.head_dim();
    let (qc, qs) = rope_tables(q_coords, dh)?;
    let (kc, ks) = rope_tables(k_coords, dh)?;
    let wq = b.get(&format!("{pre}wq"))?;
    let wk = b.get(&format!("{pre}wk"))?;
    let wv = b.get(&format!("{pre}wv"))?;
    let wo = b.get(&format!("{pre}wo"))?;
    let q = g.matmul(hq, wq)?;
    let k = g.matmul(hk, wk)?;
    let v = g.matmul(hk, wv)?;
    let q = split_heads(g, q, cfg.heads)?;
    let k = split_heads(g, k, cfg.heads)?;
    let v = split_heads(g, v, cfg.heads)?;
    let q = g.rotary(q, &qc, &qs)?;
    let k = g.rotary(k, &kc, &ks)?;
    let mixed = g.attention(q, k, v, 1.0 / (dh as f64).sqrt())?;
    let merged = merge_heads(g, mixed)?;
    g.matmul(merged, wo)
}

/// Position-wise feed-forward sub-layer with its residual connection.
pub(crate) fn feed_forward(g: &mut Graph, b: &Bound, layer: usize, x: Var) -> Result<Var> {
    let pre = format!("blk{layer}.");
    let h = g.layer_norm(x, b.get(&format!("{pre}ln2.g"))?, b.get(&format!("{pre}ln2.b"))?, LN_EPS)?;
    let f = linear(g, b, h, &format!("{pre}ff1"))?;
    let f = g.gelu(f)?;
    let f = linear(g, b, f, &format!("{pre}ff2"))?;
    g.add(x, f)
}

pub(crate) fn add_type_embedding(g: &mut Graph, b: &Bound, layer: usize, x: Var, kinds: &[TokenKind]) -> Result<Var> {
    let table = b.get(&format!("blk{layer}.type"))?;
    let sel = g.constant(one_hot(kinds));
    let emb = g.matmul(sel, table)?;
    g.add(x, emb)
}

pub(crate) fn pre_norm(g: &mut Graph, b: &Bound, layer: usize, x: Var) -> Result<Var> {
    let pre = format!("blk{layer}.");
    g.layer_norm(x, b.get(&format!("{pre}ln1.g"))?, b.get(&format!("{pre}ln1.b"))?, LN_EPS)
}

pub(crate) fn final_norm(g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
    g.layer_norm(x, b.get("final.ln.g")?, b.get("final.ln.b")?, LN_EPS)
}

/// Pre-norm transformer over `x: [T, d]`. Each layer adds its type
/// embedding, then self-attention and a feed-forward block, both residual.
pub fn attention_stack(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    x: Var,
    coords: &[(f64, f64)],
    kinds: &[TokenKind],
) -> Result<Var> {
    let t = g.shape(x)[0];
    if g.shape(x) != [t, cfg.d] || coords.len() != t || kinds.len() != t {
        return Err(Error::InvalidArgument(format!(
            "attention stack: tokens {:?}, {} coords, {} kinds",
            g.shape(x),
            coords.len(),
            kinds.len()
        )));
    }
    let mut x = x;
    for l in 0..cfg.layers {
        x = add_type_embedding(g, b, l, x, kinds)?;
        let h = pre_norm(g, b, l, x)?;
        let a = attend(g, b, cfg, l, h, h, coords, coords)?;
        x = g.add(x, a)?;
        x = feed_forward(g, b, l, x)?;
    }
    final_norm(g, b, x)
}

/// Decodes `attended: [N, d]` with `skips: [N, c2, p, p]` into logits
/// `[N, p, p]`.
pub fn decode_patches(g: &mut Graph, b: &Bound, cfg: &ModelConfig, attended: Var, skips: Var) -> Result<Var> {
    let s = g.shape(skips).to_vec();
    let (n, h, w) = match s.as_slice() {
        [n, c, h, w] if *c == cfg.enc_channels[1] => (*n, *h, *w),
        _ => return Err(Error::shape("decode_patches", &s, g.shape(attended))),
    };
    let cond = linear(g, b, attended, "dec.cond")?;
    let cond = g.broadcast_spatial(cond, h, w)?;
    let x = g.add(skips, cond)?;
    let x = g.gelu(x)?;
    let x = conv(g, b, x, "dec.conv1")?;
    let x = g.gelu(x)?;
    let x = conv(g, b, x, "dec.out")?;
    g.reshape(x, &[n, h, w])
}
