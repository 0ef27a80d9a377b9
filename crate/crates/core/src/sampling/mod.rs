//! Patch selection: binary-entropy uncertainty maps, candidate patch grids,
//! Gumbel-top-K subset sampling and boundary-proximity context weights.

mod edt;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub use edt::squared_distance_to_seeds;

/// Square patch with inclusive top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchBox {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl PatchBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.size && x >= self.x0 && x < self.x0 + self.size
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.y0 + self.size <= h && self.x0 + self.size <= w
    }

    /// Copies the box region out of a 2D map.
    pub fn crop(&self, map: &Tensor) -> Result<Tensor> {
        let (h, w) = map.hw()?;
        if !self.fits(h, w) {
            return Err(Error::InvalidArgument(format!("{self:?} does not fit a {h}×{w} map")));
        }
        let s = self.size;
        Ok(Tensor::from_fn(&[s, s], |i| map.at2(self.y0 + i / s, self.x0 + i % s)))
    }
}

/// Regular grid of candidate patches in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub boxes: Vec<PatchBox>,
    pub resolution: usize,
    pub stride: usize,
    pub size: usize,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Per-pixel binary entropy in nats, bounded by `ln 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Tensor,
}

/// Outcome of one Gumbel-top-K draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPatchSet {
    /// `(candidate index, box)` in decreasing key order.
    pub selected: Vec<(usize, PatchBox)>,
    /// Mean weight per candidate.
    pub weights: Vec<f64>,
    /// Gumbel perturbation per candidate (all zero with noise disabled).
    pub noise: Vec<f64>,
    pub k: usize,
}

impl SampledPatchSet {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|(i, _)| *i).collect()
    }

    pub fn boxes(&self) -> Vec<PatchBox> {
        self.selected.iter().map(|(_, b)| *b).collect()
    }

    /// Perturbed key `ln w + g` of a candidate; `-inf` for zero weight.
    pub fn key(&self, index: usize) -> f64 {
        perturbed_key(self.weights[index], self.noise[index])
    }
}

fn perturbed_key(w: f64, g: f64) -> f64 {
    if w > 0.0 {
        w.ln() + g
    } else {
        f64::NEG_INFINITY
    }
}

/// Binary entropy `H(p) = −p ln p − (1−p) ln(1−p)` per pixel, with
/// `0 · ln 0 = 0`.
pub fn entropy_map(prob: &Tensor) -> Result<EntropyMap> {
    let (_, w) = prob.hw()?;
    for (i, &p) in prob.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange {
                y: i / w,
                x: i % w,
                value: p,
            });
        }
    }
    Ok(EntropyMap {
        values: prob.map(binary_entropy),
    })
}

pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Candidate boxes on a `stride` lattice; a border-flush box is appended per
/// row/column when the lattice would leave the far edge uncovered.
pub fn candidate_grid(resolution: usize, patch_size: usize, stride: usize) -> Result<CandidateGrid> {
    if patch_size == 0 || patch_size > resolution {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} must be in 1..={resolution}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be ≥ 1".into()));
    }
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&p| p + patch_size <= resolution)
        .collect();
    let last = *starts.last().expect("patch fits at offset 0");
    if last + patch_size < resolution {
        starts.push(resolution - patch_size);
    }
    let boxes = starts
        .iter()
        .flat_map(|&y0| starts.iter().map(move |&x0| PatchBox { y0, x0, size: patch_size }))
        .collect();
    Ok(CandidateGrid {
        boxes,
        resolution,
        stride,
        size: patch_size,
    })
}

/// Mean of `map` over every candidate box.
pub fn patch_mean_weights(map: &Tensor, grid: &CandidateGrid) -> Result<Vec<f64>> {
    let (h, w) = map.hw()?;
    if h != grid.resolution || w != grid.resolution {
        return Err(Error::shape(
            "patch_mean_weights",
            map.shape(),
            &[grid.resolution, grid.resolution],
        ));
    }
    let area = (grid.size * grid.size) as f64;
    Ok(grid
        .boxes
        .iter()
        .map(|b| {
            let mut acc = 0.0;
            for y in b.y0..b.y0 + b.size {
                for x in b.x0..b.x0 + b.size {
                    acc += map.at2(y, x);
                }
            }
            acc / area
        })
        .collect())
}

/// Gumbel-top-K selection over candidate weights (temperature 1).
///
/// Keys are `ln w_k + g_k` with `g_k ~ Gumbel(0, 1)`; zero-weight candidates
/// get key `-inf`. The `K` largest keys are selected, ties broken by lower
/// index. With `noise_enabled == false` every `g_k` is zero and no draws are
/// consumed.
pub fn gumbel_top_k(weights: &[f64], k: usize, rng: &mut RngStream, noise_enabled: bool) -> Result<SampledPatchSet> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be ≥ 1".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("sampling weight {w} is not a finite non-negative value")));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::NoInformativeCandidates);
    }
    let noise: Vec<f64> = if noise_enabled {
        weights.iter().map(|_| rng.gumbel()).collect()
    } else {
        vec![0.0; weights.len()]
    };
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let keys: Vec<f64> = weights.iter().zip(&noise).map(|(&w, &g)| perturbed_key(w, g)).collect();
    order.sort_by(|&a, &b| match keys[b].partial_cmp(&keys[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    order.truncate(k.min(weights.len()));
    Ok(SampledPatchSet {
        selected: order.into_iter().map(|i| (i, PatchBox { y0: 0, x0: 0, size: 0 })).collect(),
        weights: weights.to_vec(),
        noise,
        k,
    })
}

/// Gumbel-top-K over a candidate grid, attaching the selected boxes.
pub fn sample_patches(
    weights: &[f64],
    grid: &CandidateGrid,
    k: usize,
    rng: &mut RngStream,
    noise_enabled: bool,
) -> Result<SampledPatchSet> {
    if weights.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} candidates",
            weights.len(),
            grid.len()
        )));
    }
    let mut set = gumbel_top_k(weights, k, rng, noise_enabled)?;
    for (i, b) in set.selected.iter_mut() {
        *b = grid.boxes[*i];
    }
    Ok(set)
}

/// Boundary pixels of a binary mask under 4-connectivity: foreground pixels
/// with a background neighbour and background pixels with a foreground
/// neighbour.
pub fn boundary_pixels(label: &Tensor) -> Result<Vec<bool>> {
    let (h, w) = label.hw()?;
    let fg = |y: usize, x: usize| label.at2(y, x) >= 0.5;
    Ok((0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let me = fg(y, x);
            let neighbours = [
                (y > 0).then(|| (y - 1, x)),
                (y + 1 < h).then(|| (y + 1, x)),
                (x > 0).then(|| (y, x - 1)),
                (x + 1 < w).then(|| (y, x + 1)),
            ];
            neighbours.into_iter().flatten().any(|(ny, nx)| fg(ny, nx) != me)
        })
        .collect())
}

/// Per-candidate context weights `1 / (1 + mean distance to the mask
/// boundary)`. Masks without a boundary (empty or full) get uniform weights.
pub fn boundary_distance_weights(label: &Tensor, grid: &CandidateGrid) -> Result<Vec<f64>> {
    let (h, w) = label.hw()?;
    if h != grid.resolution || w != grid.resolution {
        return Err(Error::shape(
            "boundary_distance_weights",
            label.shape(),
            &[grid.resolution, grid.resolution],
        ));
    }
    let seeds = boundary_pixels(label)?;
    if !seeds.iter().any(|&s| s) {
        return Ok(vec![1.0; grid.len()]);
    }
    let dist: Vec<f64> = squared_distance_to_seeds(h, w, &seeds).into_iter().map(f64::sqrt).collect();
    let dist = Tensor::raw(vec![h, w], dist);
    Ok(patch_mean_weights(&dist, grid)?
        .into_iter()
        .map(|d| 1.0 / (1.0 + d))
        .collect())
}
