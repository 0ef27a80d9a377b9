//! Exact Euclidean distance transform (Felzenszwalb & Huttenlocher),
//! computed as two separable passes of 1D lower envelopes of parabolas.

const INF: f64 = 1e20;

/// Squared Euclidean distance from every pixel of an `h×w` grid to the
/// nearest `true` seed. Pixels get `INF`-scale values when there are no seeds.
pub fn squared_distance_to_seeds(h: usize, w: usize, seeds: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { INF }).collect();
    let mut buf = vec![0.0; h.max(w)];
    // columns
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[y * w + x]).collect();
        envelope(&col, &mut buf[..h]);
        for y in 0..h {
            grid[y * w + x] = buf[y];
        }
    }
    // rows
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        envelope(&row, &mut buf[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    grid
}

/// 1D squared distance transform of a sampled function `f`.
fn envelope(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}
