//! Synthetic in-context segmentation episodes: shape classes split into
//! train and held-out sets, rendered on textured backgrounds with
//! distractors, plus the on-disk dataset format.

mod io;
mod shapes;

use crate::error::{Error, Result};
use crate::numerics::{kernels, RngStream, Tensor};

pub use io::{read_pgm, write_pgm, Dataset, DatasetManifest, EpisodeEntry};
pub use shapes::{inside, rasterize, ClassSplit, ShapeClass, ShapeParams, Split};

/// Minimum foreground pixel count for a usable target mask.
pub const MIN_FOREGROUND: usize = 30;

/// Render attempts before [`generate_episode`] gives up.
pub const MAX_ATTEMPTS: usize = 100;

/// Foreground intensity levels; each case uses one for its target class and
/// the others for distractors.
const LEVELS: [f64; 3] = [0.5, 0.72, 0.94];

/// Generator settings shared by every episode of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub n_context: usize,
    /// Each image receives `1..=max_distractors` distractor shapes.
    pub max_distractors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            n_context: 3,
            max_distractors: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be finite and ≥ 0", self.noise_sigma)));
        }
        if self.n_context == 0 || self.max_distractors == 0 {
            return Err(Error::Config("n_context and max_distractors must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// An image and its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    pub image: Tensor,
    pub mask: Tensor,
}

/// One in-context episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub target_image: Tensor,
    pub target_mask: Tensor,
    pub context: Vec<ContextPair>,
    pub class: ShapeClass,
    pub case_id: u64,
    /// Position in the dataset; distinguishes episodes of the same case.
    pub episode_id: u64,
}

impl TaskInstance {
    pub fn resolution(&self) -> usize {
        self.target_image.shape()[0]
    }

    /// All images and masks resampled to `r×r` (block mean / majority when
    /// the factor is integral).
    pub fn resampled(&self, r: usize) -> Result<TaskInstance> {
        let img = |t: &Tensor| kernels::resample_image(t, r);
        let msk = |t: &Tensor| kernels::resample_mask(t, r);
        Ok(TaskInstance {
            target_image: img(&self.target_image)?,
            target_mask: msk(&self.target_mask)?,
            context: self
                .context
                .iter()
                .map(|c| {
                    Ok(ContextPair {
                        image: img(&c.image)?,
                        mask: msk(&c.mask)?,
                    })
                })
                .collect::<Result<_>>()?,
            class: self.class,
            case_id: self.case_id,
            episode_id: self.episode_id,
        })
    }
}

/// Appearance statistics shared by every image of a case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStyle {
    pub level: usize,
    pub foreground: f64,
    pub background: f64,
    pub texture_amp: f64,
    /// Texture wave vector in cycles per image.
    pub texture_freq: (f64, f64),
    pub texture_phase: f64,
}

impl CaseStyle {
    pub fn sample(rng: &mut RngStream) -> Self {
        let level = rng.index(LEVELS.len());
        Self {
            level,
            foreground: LEVELS[level] + rng.uniform(-0.03, 0.03),
            background: rng.uniform(0.08, 0.25),
            texture_amp: rng.uniform(0.0, 0.05),
            texture_freq: (rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)),
            texture_phase: rng.uniform(0.0, std::f64::consts::TAU),
        }
    }
}

/// True iff the mask has at least [`MIN_FOREGROUND`] foreground pixels.
pub fn coverage_filter(mask: &Tensor) -> bool {
    mask.data().iter().filter(|&&v| v >= 0.5).count() >= MIN_FOREGROUND
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn dilate(mask: &[bool], r: usize) -> Vec<bool> {
    (0..r * r)
        .map(|i| {
            let (y, x) = ((i / r) as isize, (i % r) as isize);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny >= 0 && nx >= 0 && (ny as usize) < r && (nx as usize) < r && mask[ny as usize * r + nx as usize]
                })
            })
        })
        .collect()
}

/// Renders one image of `class` in the given style, with distractors from
/// `pool` that never touch the target.
fn render(
    class: ShapeClass,
    style: &CaseStyle,
    r: usize,
    pool: &[ShapeClass],
    cfg: &DataConfig,
    rng: &mut RngStream,
) -> Result<ContextPair> {
    let others: Vec<ShapeClass> = pool.iter().copied().filter(|&c| c != class).collect();
    for _ in 0..MAX_ATTEMPTS {
        let params = ShapeParams::random(class, r, rng);
        let target = rasterize(class, &params, r);
        if target.iter().filter(|&&b| b).count() < MIN_FOREGROUND {
            continue;
        }
        let keep_out = dilate(&target, r);
        let rf = r as f64;
        let (fy, fx) = style.texture_freq;
        let mut img: Vec<f64> = (0..r * r)
            .map(|i| {
                let (y, x) = ((i / r) as f64, (i % r) as f64);
                let phase = std::f64::consts::TAU * (fy * y + fx * x) / rf + style.texture_phase;
                style.background + style.texture_amp * phase.sin()
            })
            .collect();
        if !others.is_empty() {
            let n = 1 + rng.index(cfg.max_distractors);
            for _ in 0..n {
                let dc = others[rng.index(others.len())];
                let level = (style.level + 1 + rng.index(LEVELS.len() - 1)) % LEVELS.len();
                let value = LEVELS[level] + rng.uniform(-0.03, 0.03);
                // a few placements; a distractor that cannot avoid the target is dropped
                for _ in 0..10 {
                    let dp = ShapeParams::random(dc, r, rng);
                    let m = rasterize(dc, &dp, r);
                    if m.iter().zip(&keep_out).any(|(&a, &b)| a && b) {
                        continue;
                    }
                    for (v, _) in img.iter_mut().zip(&m).filter(|(_, &on)| on) {
                        *v = value;
                    }
                    break;
                }
            }
        }
        for (v, _) in img.iter_mut().zip(&target).filter(|(_, &on)| on) {
            *v = style.foreground;
        }
        for v in img.iter_mut() {
            *v = quantize(*v + cfg.noise_sigma * rng.normal());
        }
        let mask = target.iter().map(|&b| b as u8 as f64).collect();
        return Ok(ContextPair {
            image: Tensor::new(vec![r, r], img)?,
            mask: Tensor::new(vec![r, r], mask)?,
        });
    }
    Err(Error::GenerationFailed {
        class: class.to_string(),
        attempts: MAX_ATTEMPTS,
    })
}

/// Renders a target and `cfg.n_context` context pairs of `class`, all in the
/// case's shared style. Distractors come from `distractors` (other classes
/// only). Images are quantised to 8 bits so they survive a PGM round trip.
pub fn generate_episode(
    class: ShapeClass,
    case_id: u64,
    resolution: usize,
    distractors: &[ShapeClass],
    cfg: &DataConfig,
    rng: &mut RngStream,
) -> Result<TaskInstance> {
    if resolution < 16 {
        return Err(Error::InvalidArgument(format!("resolution {resolution} is below 16")));
    }
    cfg.validate()?;
    let style = CaseStyle::sample(&mut rng.derive(0));
    let target = render(class, &style, resolution, distractors, cfg, rng)?;
    let context = (0..cfg.n_context)
        .map(|_| render(class, &style, resolution, distractors, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskInstance {
        target_image: target.image,
        target_mask: target.mask,
        context,
        class,
        case_id,
        episode_id: case_id,
    })
}

/// Picks `n_c` context pairs for `target` from `pool`: same-class episodes
/// of the same case first, then same-class episodes of other cases. Each
/// tier is shuffled by `rng`; the target itself is never chosen.
pub fn select_context(
    pool: &[TaskInstance],
    target: &TaskInstance,
    n_c: usize,
    rng: &mut RngStream,
) -> Result<Vec<ContextPair>> {
    let candidates = pool
        .iter()
        .filter(|e| e.class == target.class && !(e.case_id == target.case_id && e.episode_id == target.episode_id));
    let (mut same, mut other): (Vec<&TaskInstance>, Vec<&TaskInstance>) =
        candidates.partition(|e| e.case_id == target.case_id);
    if same.len() + other.len() < n_c {
        return Err(Error::InsufficientContext {
            class: target.class.to_string(),
            needed: n_c,
            available: same.len() + other.len(),
        });
    }
    rng.shuffle(&mut same);
    rng.shuffle(&mut other);
    Ok(same
        .into_iter()
        .chain(other)
        .take(n_c)
        .map(|e| ContextPair {
            image: e.target_image.clone(),
            mask: e.target_mask.clone(),
        })
        .collect())
}
