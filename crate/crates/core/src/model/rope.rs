use crate::error::{Error, Result};
use crate::numerics::Tensor;

const BASE: f64 = 10_000.0;

/// Per-token rotation tables `(cos, sin)`, each `[T, dh/2]`.
///
/// Rotation pair `j` covers dimensions `(2j, 2j+1)`. Pairs in the first half
/// of the head (`j < dh/4`) rotate by `θ_j · y`, the rest by `θ_{j−dh/4} · x`,
/// with `θ_i = 10000^(−2i/(dh/2))`.
pub fn rope_tables(coords: &[(f64, f64)], head_dim: usize) -> Result<(Tensor, Tensor)> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "2D rotary embedding needs a head dimension divisible by 4, got {head_dim}"
        )));
    }
    if coords.is_empty() {
        return Err(Error::InvalidArgument("rotary tables need at least one token".into()));
    }
    let half = head_dim / 2;
    let quarter = head_dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| BASE.powf(-2.0 * i as f64 / half as f64))
        .collect();
    let t = coords.len();
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for &(y, x) in coords {
        for axis_pos in [y, x] {
            for &f in &freqs {
                let angle = axis_pos * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
    }
    Ok((Tensor::raw(vec![t, half], cos), Tensor::raw(vec![t, half], sin)))
}

/// Rotates one query/key vector by its patch coordinate `(y, x)`.
pub fn rope_2d(v: &[f64], coord: (f64, f64)) -> Result<Vec<f64>> {
    let (cos, sin) = rope_tables(&[coord], v.len())?;
    let mut out = vec![0.0; v.len()];
    for j in 0..v.len() / 2 {
        let (c, s) = (cos.data()[j], sin.data()[j]);
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    Ok(out)
}
