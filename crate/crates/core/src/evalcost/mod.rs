//! Dice metric, analytic FLOPs models for both architectures, and the
//! resolution sweep.
//!
//! All counts use 1 multiply-add = 2 FLOPs. With `d` the token width, `L`
//! the layer count, `T` tokens, `c1, c2` encoder widths, `p` the patch side:
//!
//! * attention: `L · (4·Tq·Tk·d + 2·d²·(2·Tq + 2·Tk))`; query/output
//!   projections on `Tq`, key/value projections on `Tk`. Patch attention has
//!   `Tq = Tk = T`, giving `L · (4·T²·d + 8·T·d²)`.
//! * feed-forward: `L · 16 · Tq · d²` (two `d×4d` products).
//! * encoder, per pixel of an encoded image or patch:
//!   `2·9·(2·c1 + c1·c2)` for the two 3×3 convolutions, plus `c2` per pixel
//!   for patch pooling and `2·c2·d` per token for the projection.
//! * decoder, per output pixel: `2·9·c2² + 2·c2 + c2`, plus `2·d·c2` per
//!   conditioning vector.
//! * sampling: `SAMPLING_PER_PIXEL · (1 + N_c) · r²` per level.
//! * aggregation: `2·K·p² + AGGREGATION_PER_PIXEL · r²` per level.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::baseline::{global_forward, GlobalModelConfig};
use crate::cascade::{forward, CascadeConfig, LevelConfig};
use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RngStream};
use crate::sampling::candidate_grid;

pub const SAMPLING_PER_PIXEL: f64 = 10.0;
pub const AGGREGATION_PER_PIXEL: f64 = 6.0;

pub const CSV_HEADER: &str =
    "resolution,arch,dice_mean,dice_std,n,flops_total,flops_attention,flops_encoder,flops_decoder,flops_other";

/// `2|A∩B| / (|A| + |B|)` after thresholding both maps at 0.5; 1 when both
/// are empty.
pub fn dice_score(pred: &crate::numerics::Tensor, gt: &crate::numerics::Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dice_score", pred.shape(), gt.shape()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Per-episode Dice with mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceResult {
    pub per_episode: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl DiceResult {
    pub fn from_scores(per_episode: Vec<f64>) -> Result<Self> {
        let n = per_episode.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no episodes to summarise".into()));
        }
        // summing in sorted order makes the statistics independent of episode order
        let mut sorted = per_episode.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let mut dev: Vec<f64> = sorted.iter().map(|d| (d - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        let var = dev.iter().sum::<f64>() / n as f64;
        Ok(Self {
            per_episode,
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    PatchIcl,
    Global,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::PatchIcl => "patchicl",
            Arch::Global => "global",
        }
    }
}

/// Analytic operation counts for one architecture at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub arch: Arch,
    pub resolution: usize,
    pub encoder: f64,
    pub attention: f64,
    pub feedforward: f64,
    pub decoder: f64,
    pub sampling: f64,
    pub aggregation: f64,
}

impl FlopsReport {
    pub fn total(&self) -> f64 {
        self.encoder + self.attention + self.feedforward + self.decoder + self.sampling + self.aggregation
    }

    /// Everything outside the attention, encoder and decoder columns.
    pub fn other(&self) -> f64 {
        self.feedforward + self.sampling + self.aggregation
    }
}

/// Attention FLOPs of one layer stack.
pub fn attention_flops(layers: usize, d: usize, tq: usize, tk: usize) -> f64 {
    let (l, d, tq, tk) = (layers as f64, d as f64, tq as f64, tk as f64);
    l * (4.0 * tq * tk * d + 2.0 * d * d * (2.0 * tq + 2.0 * tk))
}

fn encoder_conv_per_pixel(c: [usize; 2]) -> f64 {
    let (c1, c2) = (c[0] as f64, c[1] as f64);
    2.0 * 9.0 * (2.0 * c1 + c1 * c2)
}

fn decoder_per_pixel(c2: usize) -> f64 {
    let c2 = c2 as f64;
    2.0 * 9.0 * c2 * c2 + 2.0 * c2 + c2
}

/// Cost of a cascade with `n_context` context pairs. Token counts use
/// `min(K, candidates)`.
pub fn flops_patchicl(cfg: &CascadeConfig, n_context: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let (d, c2) = (m.d as f64, m.enc_channels[1] as f64);
    let mut rep = FlopsReport {
        arch: Arch::PatchIcl,
        resolution: cfg.finest(),
        encoder: 0.0,
        attention: 0.0,
        feedforward: 0.0,
        decoder: 0.0,
        sampling: 0.0,
        aggregation: 0.0,
    };
    for l in &cfg.levels {
        let n_cand = candidate_grid(l.resolution, l.patch_size, l.stride)?.len();
        let kt = l.k_target.min(n_cand);
        let t = kt + n_context * l.k_context.min(n_cand);
        let p2 = (l.patch_size * l.patch_size) as f64;
        let r2 = (l.resolution * l.resolution) as f64;
        rep.encoder += t as f64 * (p2 * (encoder_conv_per_pixel(m.enc_channels) + c2) + 2.0 * c2 * d);
        rep.attention += attention_flops(m.layers, m.d, t, t);
        rep.feedforward += m.layers as f64 * 16.0 * t as f64 * d * d;
        rep.decoder += kt as f64 * (p2 * decoder_per_pixel(m.enc_channels[1]) + 2.0 * d * c2);
        rep.sampling += SAMPLING_PER_PIXEL * (1 + n_context) as f64 * r2;
        rep.aggregation += 2.0 * kt as f64 * p2 + AGGREGATION_PER_PIXEL * r2;
    }
    Ok(rep)
}

/// Cost of the dense model run directly at `resolution`: `r²` target
/// tokens attending to themselves and `N_c·r²` context tokens.
pub fn flops_global(cfg: &GlobalModelConfig, resolution: usize, n_context: usize) -> FlopsReport {
    let (d, c2) = (cfg.d as f64, cfg.enc_channels[1] as f64);
    let t = resolution * resolution;
    let tk = (1 + n_context) * t;
    let images = (1 + n_context) as f64;
    FlopsReport {
        arch: Arch::Global,
        resolution,
        encoder: images * t as f64 * (encoder_conv_per_pixel(cfg.enc_channels) + 2.0 * c2 * d),
        attention: attention_flops(cfg.layers, cfg.d, t, tk),
        feedforward: cfg.layers as f64 * 16.0 * t as f64 * d * d,
        decoder: t as f64 * (decoder_per_pixel(cfg.enc_channels[1]) + 2.0 * d * c2),
        sampling: 0.0,
        aggregation: 0.0,
    }
}

/// The cascade with every level resolution scaled so the finest level
/// equals `resolution`; patch size, stride and K stay fixed.
pub fn scale_cascade(cfg: &CascadeConfig, resolution: usize) -> Result<CascadeConfig> {
    let finest = cfg.finest();
    if finest == 0 {
        return Err(Error::Config("a cascade needs at least one level".into()));
    }
    let levels = cfg
        .levels
        .iter()
        .map(|l| LevelConfig {
            resolution: (l.resolution * resolution / finest).max(l.patch_size),
            ..l.clone()
        })
        .collect();
    let scaled = CascadeConfig {
        levels,
        ..cfg.clone()
    };
    scaled.validate()?;
    Ok(scaled)
}

/// Dice of a cascade over `episodes`, each run on the stream
/// `(seed, episode id)`. Episodes are spread over `jobs` threads; the
/// result order always follows `episodes`.
pub fn evaluate_patchicl(
    episodes: &[TaskInstance],
    cfg: &CascadeConfig,
    params: &ParamSet,
    seed: u64,
    jobs: usize,
) -> Result<Vec<f64>> {
    run_pool(jobs, || {
        episodes
            .par_iter()
            .map(|ep| {
                let pyr = forward(ep, cfg, params, &RngStream::new(seed, ep.episode_id))?;
                dice_score(&pyr.final_prob, &ep.target_mask)
            })
            .collect()
    })
}

pub fn evaluate_global(
    episodes: &[TaskInstance],
    cfg: &GlobalModelConfig,
    params: &ParamSet,
    jobs: usize,
) -> Result<Vec<f64>> {
    run_pool(jobs, || {
        episodes
            .par_iter()
            .map(|ep| dice_score(&global_forward(ep, cfg, params)?, &ep.target_mask))
            .collect()
    })
}

pub(crate) fn run_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .install(f)
}

/// One CSV row of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub flops: FlopsReport,
    pub dice: Option<DiceResult>,
}

/// Trained models to score in the sweep; `None` gives cost-only rows.
pub struct SweepModels<'a> {
    pub cascade: &'a CascadeConfig,
    pub cascade_params: &'a ParamSet,
    pub global: &'a GlobalModelConfig,
    pub global_params: &'a ParamSet,
    /// Episodes for a resolution.
    pub episodes: &'a (dyn Fn(usize) -> Result<Vec<TaskInstance>> + Sync),
    pub seed: u64,
    pub jobs: usize,
}

/// Both architectures at every resolution, patch cascade first.
pub fn benchmark_sweep(
    resolutions: &[usize],
    cascade: &CascadeConfig,
    global: &GlobalModelConfig,
    n_context: usize,
    models: Option<&SweepModels<'_>>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(2 * resolutions.len());
    for &r in resolutions {
        let scaled = scale_cascade(cascade, r)?;
        let mut patch = SweepRow {
            flops: flops_patchicl(&scaled, n_context)?,
            dice: None,
        };
        patch.flops.resolution = r;
        let mut dense = SweepRow {
            flops: flops_global(global, r, n_context),
            dice: None,
        };
        if let Some(m) = models {
            let episodes = (m.episodes)(r)?;
            let scaled_trained = scale_cascade(m.cascade, r)?;
            patch.dice = Some(DiceResult::from_scores(evaluate_patchicl(
                &episodes,
                &scaled_trained,
                m.cascade_params,
                m.seed,
                m.jobs,
            )?)?);
            dense.dice = Some(DiceResult::from_scores(evaluate_global(
                &episodes,
                m.global,
                m.global_params,
                m.jobs,
            )?)?);
        }
        rows.push(patch);
        rows.push(dense);
    }
    Ok(rows)
}

/// First resolution at which the cascade is cheaper than the dense model.
pub fn crossover(rows: &[SweepRow]) -> Option<usize> {
    let mut res: Vec<usize> = rows.iter().map(|r| r.flops.resolution).collect();
    res.dedup();
    res.into_iter().find(|&r| {
        let total = |a: Arch| {
            rows.iter()
                .find(|row| row.flops.resolution == r && row.flops.arch == a)
                .map(|row| row.flops.total())
        };
        matches!((total(Arch::PatchIcl), total(Arch::Global)), (Some(p), Some(g)) if p < g)
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let f = &row.flops;
        let (mean, std, n) = match &row.dice {
            Some(d) => (format!("{:.6}", d.mean), format!("{:.6}", d.std), d.n),
            None => (String::new(), String::new(), 0),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.0},{:.0},{:.0},{:.0},{:.0}",
            f.resolution,
            f.arch.name(),
            mean,
            std,
            n,
            f.total(),
            f.attention,
            f.encoder,
            f.decoder,
            f.other()
        );
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
