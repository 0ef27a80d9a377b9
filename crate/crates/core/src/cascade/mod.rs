//! The coarse-to-fine cascade: per level, sample target and context
//! patches, attend over them jointly, average overlapping patch logits and
//! add them onto the upsampled previous level. Also the multi-level
//! BCE + soft Dice objective.

use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::model::{attention_stack, decode_patches, encode_patches, ModelConfig, TokenKind};
use crate::numerics::{kernels, Bound, Graph, ParamSet, RngStream, Tensor, Var};
use crate::sampling::{
    boundary_distance_weights, candidate_grid, entropy_map, patch_mean_weights, sample_patches, PatchBox,
    SampledPatchSet,
};

/// Soft Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// One cascade level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    pub resolution: usize,
    pub k_target: usize,
    /// Patches drawn from each context pair.
    pub k_context: usize,
    pub patch_size: usize,
    pub stride: usize,
}

/// The full level schedule plus the shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub levels: Vec<LevelConfig>,
    pub model: ModelConfig,
    /// Gumbel perturbation of both target and context selection.
    pub noise_enabled: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        let level = |resolution, k_target, k_context| LevelConfig {
            resolution,
            k_target,
            k_context,
            patch_size: 8,
            stride: 8,
        };
        Self {
            levels: vec![level(16, 4, 2), level(32, 8, 3), level(64, 16, 4)],
            model: ModelConfig::default(),
            noise_enabled: true,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.levels.is_empty() {
            return Err(Error::Config("a cascade needs at least one level".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.patch_size != self.model.patch_size {
                return Err(Error::Config(format!(
                    "level {i}: patch size {} differs from the model's {}",
                    l.patch_size, self.model.patch_size
                )));
            }
            if l.patch_size > l.resolution || l.k_target == 0 || l.k_context == 0 || l.stride == 0 {
                return Err(Error::Config(format!("level {i}: invalid {l:?}")));
            }
            if i > 0 && l.resolution <= self.levels[i - 1].resolution {
                return Err(Error::Config("level resolutions must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    pub fn finest(&self) -> usize {
        self.levels.last().map_or(0, |l| l.resolution)
    }
}

/// Output of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub resolution: usize,
    /// Averaged patch logits, zero where nothing was sampled.
    pub logits: Tensor,
    pub coverage: Tensor,
    pub combined: Tensor,
    pub patches: SampledPatchSet,
    pub context_patches: Vec<SampledPatchSet>,
}

/// Per-level predictions plus the final probability map at input
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPyramid {
    pub levels: Vec<LevelPrediction>,
    pub final_prob: Tensor,
}

/// A level evaluated on a graph; `combined` stays differentiable.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub resolution: usize,
    pub logits: Var,
    pub combined: Var,
    pub coverage: Tensor,
    pub patches: SampledPatchSet,
    pub context_patches: Vec<SampledPatchSet>,
}

/// Per-pixel mean of overlapping patch logits. Uncovered pixels get logit 0
/// and coverage 0.
pub fn aggregate_patches(patch_logits: &[(PatchBox, Tensor)], resolution: usize) -> Result<(Tensor, Tensor)> {
    let r = resolution;
    let mut sum = vec![0.0; r * r];
    let mut count = vec![0usize; r * r];
    for (b, t) in patch_logits {
        if !b.fits(r, r) {
            return Err(Error::InvalidArgument(format!("{b:?} lies outside a {r}×{r} map")));
        }
        if t.shape() != [b.size, b.size] {
            return Err(Error::shape("aggregate_patches", t.shape(), &[b.size, b.size]));
        }
        for y in 0..b.size {
            for x in 0..b.size {
                let i = (b.y0 + y) * r + b.x0 + x;
                sum[i] += t.at2(y, x);
                count[i] += 1;
            }
        }
    }
    let logits = sum.iter().zip(&count).map(|(&s, &c)| s / c.max(1) as f64).collect();
    let coverage = count.iter().map(|&c| (c > 0) as u8 as f64).collect();
    Ok((Tensor::new(vec![r, r], logits)?, Tensor::new(vec![r, r], coverage)?))
}

/// `upsample(prev) + coverage ⊙ level_logits`, upsampling bilinearly.
pub fn fuse_levels(prev_combined: &Tensor, level_logits: &Tensor, coverage: &Tensor) -> Result<Tensor> {
    if level_logits.shape() != coverage.shape() {
        return Err(Error::shape("fuse_levels", level_logits.shape(), coverage.shape()));
    }
    let (h, w) = level_logits.hw()?;
    let up = if prev_combined.shape() == [h, w] {
        prev_combined.clone()
    } else {
        kernels::resize_map(prev_combined, h, w)?
    };
    let gated = coverage.zip_map(level_logits, "fuse_levels", |c, l| c * l)?;
    up.zip_map(&gated, "fuse_levels", |u, g| u + g)
}

fn token_coord(b: &PatchBox, stride: usize) -> (f64, f64) {
    ((b.y0 / stride) as f64, (b.x0 / stride) as f64)
}

fn push_patch(buf: &mut Vec<f64>, img: &Tensor, label: Option<&Tensor>, b: &PatchBox) -> Result<()> {
    buf.extend_from_slice(b.crop(img)?.data());
    match label {
        Some(l) => buf.extend_from_slice(b.crop(l)?.data()),
        None => buf.extend(std::iter::repeat_n(0.0, b.size * b.size)),
    }
    Ok(())
}

/// Target sampling weights: uniform at the first level, otherwise the mean
/// entropy of the upsampled previous prediction (uniform again if that is
/// zero everywhere).
fn target_weights(prev: Option<&Tensor>, r: usize, grid: &crate::sampling::CandidateGrid) -> Result<Vec<f64>> {
    let Some(prev) = prev else {
        return Ok(vec![1.0; grid.len()]);
    };
    let up = if prev.shape() == [r, r] {
        prev.clone()
    } else {
        kernels::resize_map(prev, r, r)?
    };
    let ent = entropy_map(&up.map(kernels::sigmoid))?;
    let w = patch_mean_weights(&ent.values, grid)?;
    if w.iter().all(|&v| v == 0.0) {
        Ok(vec![1.0; grid.len()])
    } else {
        Ok(w)
    }
}

/// Runs one level on a graph. `task` must already be at the level's
/// resolution; `prev` is the previous level's combined logits.
#[allow(clippy::too_many_arguments)]
pub fn level_on_graph(
    g: &mut Graph,
    b: &Bound,
    model: &ModelConfig,
    task: &TaskInstance,
    level: &LevelConfig,
    prev: Option<Var>,
    noise_enabled: bool,
    rng: &RngStream,
) -> Result<LevelTrace> {
    let r = level.resolution;
    if task.resolution() != r {
        return Err(Error::InvalidArgument(format!(
            "task is {}×{0}, level expects {r}×{r}",
            task.resolution()
        )));
    }
    let p = level.patch_size;
    let grid = candidate_grid(r, p, level.stride)?;
    let prev_value = prev.map(|v| g.value(v).clone());
    let weights = target_weights(prev_value.as_ref(), r, &grid)?;
    let patches = sample_patches(&weights, &grid, level.k_target, &mut rng.derive(0), noise_enabled)?;
    let context_patches = task
        .context
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let w = boundary_distance_weights(&c.mask, &grid)?;
            sample_patches(&w, &grid, level.k_context, &mut rng.derive(1 + i as u64), noise_enabled)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut input = Vec::new();
    let mut coords = Vec::new();
    let mut kinds = Vec::new();
    let target_boxes = patches.boxes();
    for bx in &target_boxes {
        push_patch(&mut input, &task.target_image, None, bx)?;
        coords.push(token_coord(bx, level.stride));
        kinds.push(TokenKind::Target);
    }
    for (c, set) in task.context.iter().zip(&context_patches) {
        for bx in set.boxes() {
            push_patch(&mut input, &c.image, Some(&c.mask), &bx)?;
            coords.push(token_coord(&bx, level.stride));
            kinds.push(TokenKind::Context);
        }
    }
    let n = kinds.len();
    let k = target_boxes.len();
    let enc = encode_patches(g, b, model, Tensor::new(vec![n, 2, p, p], input)?, r)?;
    let att = attention_stack(g, b, model, enc.tokens, &coords, &kinds)?;
    let att_t = g.slice_rows(att, 0, k)?;
    let skips_t = g.slice_rows(enc.skips, 0, k)?;
    let patch_logits = decode_patches(g, b, model, att_t, skips_t)?;

    let offsets: Vec<(usize, usize)> = target_boxes.iter().map(|bx| (bx.y0, bx.x0)).collect();
    let summed = g.place_patches(patch_logits, &offsets, r)?;
    let mut count = vec![0usize; r * r];
    for bx in &target_boxes {
        for y in 0..p {
            for x in 0..p {
                count[(bx.y0 + y) * r + bx.x0 + x] += 1;
            }
        }
    }
    let denom = g.constant(Tensor::new(vec![r, r], count.iter().map(|&c| c.max(1) as f64).collect())?);
    let logits = g.div(summed, denom)?;
    let coverage = Tensor::new(vec![r, r], count.iter().map(|&c| (c > 0) as u8 as f64).collect())?;
    let combined = match prev {
        None => logits,
        Some(pv) => {
            let up = g.resize_bilinear(pv, r, r)?;
            let cov = g.constant(coverage.clone());
            let gated = g.mul(cov, logits)?;
            g.add(up, gated)?
        }
    };
    Ok(LevelTrace {
        resolution: r,
        logits,
        combined,
        coverage,
        patches,
        context_patches,
    })
}

/// All levels on a graph, coarse to fine. Level `ℓ` draws from
/// `rng.derive(ℓ)`.
pub fn forward_graph(
    g: &mut Graph,
    b: &Bound,
    task: &TaskInstance,
    cfg: &CascadeConfig,
    rng: &RngStream,
) -> Result<Vec<LevelTrace>> {
    cfg.validate()?;
    let mut traces: Vec<LevelTrace> = Vec::with_capacity(cfg.levels.len());
    for (i, level) in cfg.levels.iter().enumerate() {
        let task_r = task.resampled(level.resolution)?;
        let prev = traces.last().map(|t| t.combined);
        let t = level_on_graph(g, b, &cfg.model, &task_r, level, prev, cfg.noise_enabled, &rng.derive(i as u64))?;
        traces.push(t);
    }
    Ok(traces)
}

fn prediction(g: &Graph, t: LevelTrace) -> LevelPrediction {
    LevelPrediction {
        resolution: t.resolution,
        logits: g.value(t.logits).clone(),
        coverage: t.coverage,
        combined: g.value(t.combined).clone(),
        patches: t.patches,
        context_patches: t.context_patches,
    }
}

/// Runs one level with frozen parameters. `task` must be at the level's
/// resolution and `prev` present for every level but the first.
pub fn run_level(
    task: &TaskInstance,
    level: &LevelConfig,
    prev: Option<&LevelPrediction>,
    cfg: &CascadeConfig,
    params: &ParamSet,
    rng: &RngStream,
) -> Result<LevelPrediction> {
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let prev = prev.map(|p| g.constant(p.combined.clone()));
    let t = level_on_graph(&mut g, &b, &cfg.model, task, level, prev, cfg.noise_enabled, rng)?;
    Ok(prediction(&g, t))
}

/// Full cascade inference with frozen parameters.
pub fn forward(task: &TaskInstance, cfg: &CascadeConfig, params: &ParamSet, rng: &RngStream) -> Result<PredictionPyramid> {
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let traces = forward_graph(&mut g, &b, task, cfg, rng)?;
    let levels: Vec<LevelPrediction> = traces.into_iter().map(|t| prediction(&g, t)).collect();
    let last = levels.last().expect("validated non-empty");
    let prob = last.combined.map(kernels::sigmoid);
    let r0 = task.resolution();
    let final_prob = if r0 == last.resolution {
        prob
    } else {
        kernels::resize_map(&prob, r0, r0)?
    };
    Ok(PredictionPyramid { levels, final_prob })
}

fn check_gt(gt: &Tensor, logits_shape: &[usize]) -> Result<()> {
    if gt.shape() != logits_shape {
        return Err(Error::shape("level_loss", logits_shape, gt.shape()));
    }
    kernels::check_binary(gt, "level_loss")
}

/// BCE (mean over pixels) plus soft Dice loss with `ε = 1`, on a graph.
pub fn level_loss_graph(g: &mut Graph, combined: Var, gt: &Tensor) -> Result<Var> {
    check_gt(gt, g.shape(combined))?;
    let y = g.constant(gt.clone());
    // −[y ln σ(z) + (1−y) ln(1−σ(z))] = softplus(z) − y·z
    let sp = g.softplus(combined)?;
    let yz = g.mul(y, combined)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.mean(bce)?;
    let prob = g.sigmoid(combined)?;
    let py = g.mul(prob, y)?;
    let inter = g.sum(py)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_EPS)?;
    let psum = g.sum(prob)?;
    let den = g.add_scalar(psum, gt.sum() + DICE_EPS)?;
    let ratio = g.div(num, den)?;
    let dice = g.scale(ratio, -1.0)?;
    let dice = g.add_scalar(dice, 1.0)?;
    g.add(bce, dice)
}

/// Value of [`level_loss_graph`] for a fixed logit map.
pub fn level_loss(combined: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(combined.clone());
    let l = level_loss_graph(&mut g, z, gt)?;
    g.value(l).item()
}

/// Sum of per-level losses against the ground truth resampled to each
/// level by area majority.
pub fn total_loss_graph(g: &mut Graph, traces: &[LevelTrace], gt: &Tensor) -> Result<(Var, Vec<Var>)> {
    let mut per_level = Vec::with_capacity(traces.len());
    for t in traces {
        let gt_r = kernels::resample_mask(gt, t.resolution)?;
        per_level.push(level_loss_graph(g, t.combined, &gt_r)?);
    }
    let mut total = *per_level
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty pyramid".into()))?;
    for &l in &per_level[1..] {
        total = g.add(total, l)?;
    }
    Ok((total, per_level))
}

pub fn total_loss(pyramid: &PredictionPyramid, gt: &Tensor) -> Result<f64> {
    if pyramid.levels.is_empty() {
        return Err(Error::InvalidArgument("empty pyramid".into()));
    }
    pyramid.levels.iter().try_fold(0.0, |acc, l| {
        Ok(acc + level_loss(&l.combined, &kernels::resample_mask(gt, l.resolution)?)?)
    })
}

#[cfg(test)]
mod tests;
