//! Dense global in-context baseline: one token per pixel at a working
//! resolution, every target pixel attending to all target and context
//! pixels.

use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::model::{init_conv_blocks, init_transformer, layers, ModelConfig, TokenKind};
use crate::numerics::{kernels, Bound, Graph, ParamSet, RngStream, Tensor, Var};

pub const DEFAULT_CAP: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub enc_channels: [usize; 2],
    /// Side of the per-pixel token grid; inputs are resampled to it.
    pub resolution: usize,
    pub cap: usize,
}

impl Default for GlobalModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            layers: 1,
            heads: 1,
            enc_channels: [8, 16],
            resolution: 32,
            cap: DEFAULT_CAP,
        }
    }
}

impl GlobalModelConfig {
    /// The equivalent patch-model config, used for shared layer shapes.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            patch_size: self.resolution,
            enc_channels: self.enc_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.resolution > self.cap {
            return Err(Error::ResolutionCap {
                resolution: self.resolution,
                cap: self.cap,
            });
        }
        Ok(())
    }

    pub fn tokens_per_image(&self) -> usize {
        self.resolution * self.resolution
    }
}

pub fn init_global_params(cfg: &GlobalModelConfig, rng: &mut RngStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    init_conv_blocks(&cfg.model(), &mut p, rng)?;
    init_transformer(&cfg.model(), &mut p, rng)?;
    Ok(p)
}

/// Encodes `[N, 2, r, r]` into per-pixel tokens `[N·r², d]` and skip maps.
fn encode_pixels(g: &mut Graph, b: &Bound, model: &ModelConfig, input: Tensor, r: usize) -> Result<(Var, Var)> {
    let n = input.shape()[0];
    let c2 = model.enc_channels[1];
    let x = g.constant(input);
    let h = g.conv2d(x, b.get("enc.conv1.w")?, b.get("enc.conv1.b")?)?;
    let h = g.gelu(h)?;
    let h = g.conv2d(h, b.get("enc.conv2.w")?, b.get("enc.conv2.b")?)?;
    let skips = g.gelu(h)?;
    let flat = g.reshape(skips, &[n, c2, r * r])?;
    let per_pixel = g.permute(flat, &[0, 2, 1])?;
    let per_pixel = g.reshape(per_pixel, &[n * r * r, c2])?;
    let tokens = g.matmul(per_pixel, b.get("enc.proj.w")?)?;
    let tokens = g.add(tokens, b.get("enc.proj.b")?)?;
    let enc = g.constant(Tensor::new(vec![model.d], crate::model::resolution_encoding(r, model.d)?)?);
    let tokens = g.add(tokens, enc)?;
    Ok((tokens, skips))
}

/// Target logits `[r, r]` for a task already at the working resolution.
pub fn global_logits_graph(g: &mut Graph, b: &Bound, cfg: &GlobalModelConfig, task: &TaskInstance) -> Result<Var> {
    cfg.validate()?;
    let r = cfg.resolution;
    if task.resolution() != r {
        return Err(Error::InvalidArgument(format!(
            "task is {}×{0}, global model works at {r}×{r}",
            task.resolution()
        )));
    }
    let model = cfg.model();
    let nc = task.context.len();
    let t = r * r;
    let mut input = Vec::with_capacity((1 + nc) * 2 * t);
    input.extend_from_slice(task.target_image.data());
    input.extend(std::iter::repeat_n(0.0, t));
    for c in &task.context {
        input.extend_from_slice(c.image.data());
        input.extend_from_slice(c.mask.data());
    }
    let (tokens, skips) = encode_pixels(g, b, &model, Tensor::new(vec![1 + nc, 2, r, r], input)?, r)?;
    let coords: Vec<(f64, f64)> = (0..t).map(|i| ((i / r) as f64, (i % r) as f64)).collect();
    let mut xt = g.slice_rows(tokens, 0, t)?;
    let target_kinds = vec![TokenKind::Target; t];
    let mut kv_coords = coords.clone();
    let (xc, context_kinds) = if nc > 0 {
        for _ in 0..nc {
            kv_coords.extend_from_slice(&coords);
        }
        (Some(g.slice_rows(tokens, t, nc * t)?), vec![TokenKind::Context; nc * t])
    } else {
        (None, Vec::new())
    };
    for l in 0..model.layers {
        xt = layers::add_type_embedding(g, b, l, xt, &target_kinds)?;
        let ht = layers::pre_norm(g, b, l, xt)?;
        let keys = match xc {
            Some(xc) => {
                // context tokens are not updated; they only receive this layer's type embedding
                let xc_l = layers::add_type_embedding(g, b, l, xc, &context_kinds)?;
                let hc = layers::pre_norm(g, b, l, xc_l)?;
                g.concat_rows(&[ht, hc])?
            }
            None => ht,
        };
        let a = layers::attend(g, b, &model, l, ht, keys, &coords, &kv_coords)?;
        xt = g.add(xt, a)?;
        xt = layers::feed_forward(g, b, l, xt)?;
    }
    let xt = layers::final_norm(g, b, xt)?;
    // per-pixel conditioning replaces the per-patch broadcast of the patch decoder
    let c2 = model.enc_channels[1];
    let cond = g.matmul(xt, b.get("dec.cond.w")?)?;
    let cond = g.add(cond, b.get("dec.cond.b")?)?;
    let cond = g.permute(cond, &[1, 0])?;
    let cond = g.reshape(cond, &[1, c2, r, r])?;
    let skip_t = g.slice_rows(skips, 0, 1)?;
    let x = g.add(skip_t, cond)?;
    let x = g.gelu(x)?;
    let x = g.conv2d(x, b.get("dec.conv1.w")?, b.get("dec.conv1.b")?)?;
    let x = g.gelu(x)?;
    let x = g.conv2d(x, b.get("dec.out.w")?, b.get("dec.out.b")?)?;
    g.reshape(x, &[r, r])
}

/// Probability map at the task's own resolution.
pub fn global_forward(task: &TaskInstance, cfg: &GlobalModelConfig, params: &ParamSet) -> Result<Tensor> {
    cfg.validate()?;
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let task_r = task.resampled(cfg.resolution)?;
    let logits = global_logits_graph(&mut g, &b, cfg, &task_r)?;
    let prob = g.value(logits).map(kernels::sigmoid);
    let r0 = task.resolution();
    if r0 == cfg.resolution {
        Ok(prob)
    } else {
        kernels::resize_map(&prob, r0, r0)
    }
}

#[cfg(test)]
mod tests;
