//! Entropy-weighted patch selection on a synthetic uncertainty map, and
//! the empirical selection frequencies of Gumbel top-K.

use patchicl::numerics::{RngStream, Tensor};
use patchicl::sampling::{candidate_grid, entropy_map, gumbel_top_k, patch_mean_weights, sample_patches};

fn main() -> patchicl::Result<()> {
    // confident everywhere except a blob around (20, 44)
    let r = 64;
    let prob = Tensor::from_fn(&[r, r], |i| {
        let (y, x) = ((i / r) as f64, (i % r) as f64);
        let d2 = (y - 20.0).powi(2) + (x - 44.0).powi(2);
        0.02 + 0.48 * (-d2 / 60.0).exp()
    });
    let h = entropy_map(&prob)?;
    let grid = candidate_grid(r, 8, 8)?;
    let w = patch_mean_weights(&h.values, &grid)?;
    let mut rng = RngStream::new(1, 0);
    let picked = sample_patches(&w, &grid, 4, &mut rng, true)?;
    println!("{} candidates, picked:", grid.len());
    for (i, b) in &picked.selected {
        println!("  #{i:<3} at ({:>2}, {:>2})  weight {:.3}", b.y0, b.x0, w[*i]);
    }

    let weights = [1.0, 2.0, 3.0, 4.0];
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let s = gumbel_top_k(&weights, 1, &mut rng, true)?;
        counts[s.selected[0].0] += 1;
    }
    println!("K=1 frequencies vs w/Σw:");
    for (i, c) in counts.iter().enumerate() {
        println!("  {i}: {:.4}  {:.4}", *c as f64 / draws as f64, weights[i] / 10.0);
    }
    Ok(())
}
