//! Patch encoder with resolution conditioning, the joint target/context
//! transformer with 2D rotary positions and per-layer type embeddings, and
//! the patch decoder.

pub(crate) mod layers;
mod rope;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, RngStream, Tensor};

pub use layers::{attend, attention_stack, decode_patches, encode_patches, Encoded};
pub use rope::{rope_2d, rope_tables};

/// Architecture hyper-parameters shared by every cascade level.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    /// Transformer layer count.
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Output widths of the two encoder convolutions.
    pub enc_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 2,
            patch_size: 8,
            enc_channels: [8, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} must be divisible by heads = {}", self.d, self.heads)));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head dimension {} must be divisible by 4 for 2D rotary embeddings",
                self.head_dim()
            )));
        }
        if self.layers == 0 || self.patch_size == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Config("layers, patch size and channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Which type embedding a token receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Target,
    /// A context image patch encoded jointly with its label.
    Context,
}

impl TokenKind {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            TokenKind::Target => 0,
            TokenKind::Context => 1,
        }
    }
}

/// One transformer input: embedding, patch-grid coordinate and kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchToken {
    pub embedding: Vec<f64>,
    pub coord: (f64, f64),
    pub kind: TokenKind,
}

/// Sinusoidal encoding of a resolution: component `2i` is
/// `sin(r / 10000^(2i/d))`, component `2i+1` the matching cosine.
pub fn resolution_encoding(r: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("resolution encoding width must be even, got {d}")));
    }
    Ok((0..d)
        .map(|j| {
            let i = j / 2;
            let angle = r as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect())
}

fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

fn fill(shape: &[usize], v: f64) -> Tensor {
    Tensor::full(shape, v)
}

/// Encoder and decoder parameters, shared with the dense baseline.
pub(crate) fn init_conv_blocks(cfg: &ModelConfig, p: &mut ParamSet, rng: &mut RngStream) -> Result<()> {
    let [c1, c2] = cfg.enc_channels;
    let d = cfg.d;
    let conv_std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    p.insert("enc.conv1.w", normal(&[c1, 2, 3, 3], conv_std(18), rng))?;
    p.insert("enc.conv1.b", fill(&[c1], 0.0))?;
    p.insert("enc.conv2.w", normal(&[c2, c1, 3, 3], conv_std(9 * c1), rng))?;
    p.insert("enc.conv2.b", fill(&[c2], 0.0))?;
    p.insert("enc.proj.w", normal(&[c2, d], (1.0 / c2 as f64).sqrt(), rng))?;
    p.insert("enc.proj.b", fill(&[d], 0.0))?;
    p.insert("dec.cond.w", normal(&[d, c2], (1.0 / d as f64).sqrt(), rng))?;
    p.insert("dec.cond.b", fill(&[c2], 0.0))?;
    p.insert("dec.conv1.w", normal(&[c2, c2, 3, 3], conv_std(9 * c2), rng))?;
    p.insert("dec.conv1.b", fill(&[c2], 0.0))?;
    // small read-out keeps initial logits near zero
    p.insert("dec.out.w", normal(&[1, c2, 1, 1], 0.01, rng))?;
    p.insert("dec.out.b", fill(&[1], 0.0))?;
    Ok(())
}

pub(crate) fn init_transformer(cfg: &ModelConfig, p: &mut ParamSet, rng: &mut RngStream) -> Result<()> {
    let d = cfg.d;
    let std = (1.0 / d as f64).sqrt();
    for l in 0..cfg.layers {
        let pre = format!("blk{l}.");
        p.insert(&format!("{pre}type"), normal(&[TokenKind::COUNT, d], 0.1, rng))?;
        p.insert(&format!("{pre}ln1.g"), fill(&[d], 1.0))?;
        p.insert(&format!("{pre}ln1.b"), fill(&[d], 0.0))?;
        for name in ["wq", "wk", "wv"] {
            p.insert(&format!("{pre}{name}"), normal(&[d, d], std, rng))?;
        }
        p.insert(&format!("{pre}wo"), normal(&[d, d], std / (2.0 * cfg.layers as f64).sqrt(), rng))?;
        p.insert(&format!("{pre}ln2.g"), fill(&[d], 1.0))?;
        p.insert(&format!("{pre}ln2.b"), fill(&[d], 0.0))?;
        p.insert(&format!("{pre}ff1.w"), normal(&[d, 4 * d], std, rng))?;
        p.insert(&format!("{pre}ff1.b"), fill(&[4 * d], 0.0))?;
        p.insert(
            &format!("{pre}ff2.w"),
            normal(&[4 * d, d], (1.0 / (4 * d) as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt(), rng),
        )?;
        p.insert(&format!("{pre}ff2.b"), fill(&[d], 0.0))?;
    }
    p.insert("final.ln.g", fill(&[d], 1.0))?;
    p.insert("final.ln.b", fill(&[d], 0.0))?;
    Ok(())
}

/// Freshly initialised parameters for the patch model.
pub fn init_params(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    init_conv_blocks(cfg, &mut p, rng)?;
    init_transformer(cfg, &mut p, rng)?;
    Ok(p)
}

/// Stacks a patch and an optional label into the 2-channel encoder input.
pub fn patch_input(image: &Tensor, label: Option<&Tensor>) -> Result<Tensor> {
    let (h, w) = image.hw()?;
    let mut data = image.data().to_vec();
    match label {
        Some(l) => {
            if l.shape() != image.shape() {
                return Err(Error::shape("patch_input", image.shape(), l.shape()));
            }
            data.extend_from_slice(l.data());
        }
        None => data.extend(std::iter::repeat_n(0.0, h * w)),
    }
    Tensor::new(vec![1, 2, h, w], data)
}

/// Embedding of a single patch plus its decoder skip features.
pub fn encode_patch(
    params: &ParamSet,
    cfg: &ModelConfig,
    image_patch: &Tensor,
    label_patch: Option<&Tensor>,
    resolution: usize,
) -> Result<(Vec<f64>, Tensor)> {
    let (h, w) = image_patch.hw()?;
    if h != cfg.patch_size || w != cfg.patch_size {
        return Err(Error::shape("encode_patch", image_patch.shape(), &[cfg.patch_size, cfg.patch_size]));
    }
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let input = patch_input(image_patch, label_patch)?;
    let enc = encode_patches(&mut g, &b, cfg, input, resolution)?;
    Ok((g.value(enc.tokens).data().to_vec(), g.value(enc.skips).clone()))
}

/// Runs the transformer over a token list and returns one embedding per
/// token, in input order.
pub fn attend_tokens(params: &ParamSet, cfg: &ModelConfig, tokens: &[PatchToken]) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("attention needs at least one token".into()));
    }
    let d = cfg.d;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        if t.embedding.len() != d {
            return Err(Error::shape("attend_tokens", &[t.embedding.len()], &[d]));
        }
        data.extend_from_slice(&t.embedding);
    }
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let x = g.constant(Tensor::new(vec![tokens.len(), d], data)?);
    let coords: Vec<(f64, f64)> = tokens.iter().map(|t| t.coord).collect();
    let kinds: Vec<TokenKind> = tokens.iter().map(|t| t.kind).collect();
    let out = attention_stack(&mut g, &b, cfg, x, &coords, &kinds)?;
    Ok(g.value(out).data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// Logits for one patch from its attended embedding and skip features.
pub fn decode_patch(params: &ParamSet, cfg: &ModelConfig, attended: &[f64], skips: &Tensor) -> Result<Tensor> {
    let c2 = cfg.enc_channels[1];
    let p = cfg.patch_size;
    if attended.len() != cfg.d {
        return Err(Error::shape("decode_patch", &[attended.len()], &[cfg.d]));
    }
    if skips.shape() != [1, c2, p, p] {
        return Err(Error::shape("decode_patch", skips.shape(), &[1, c2, p, p]));
    }
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let a = g.constant(Tensor::new(vec![1, cfg.d], attended.to_vec())?);
    let s = g.constant(skips.clone());
    let out = decode_patches(&mut g, &b, cfg, a, s)?;
    g.value(out).reshape(&[p, p])
}
