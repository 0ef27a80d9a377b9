use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

/// Central-difference gradient of `loss_fn` with respect to every trainable
/// scalar of `params`.
///
/// `loss_fn` must be deterministic in `params`; this is checked by evaluating
/// it twice at the unperturbed point.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamSet, step: f64) -> Result<IndexMap<String, Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite difference step must be > 0, got {step}")));
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut work = params.clone();
    let mut out = IndexMap::new();
    let entries: Vec<(String, Tensor, bool)> = params
        .iter()
        .map(|(n, t, tr)| (n.to_string(), t.clone(), tr))
        .collect();
    for (name, tensor, trainable) in entries {
        if !trainable {
            continue;
        }
        let mut grad = vec![0.0; tensor.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let mut plus = tensor.clone();
            plus.data_mut()[i] += step;
            work.set(&name, plus)?;
            let fp = loss_fn(&work)?;
            let mut minus = tensor.clone();
            minus.data_mut()[i] -= step;
            work.set(&name, minus)?;
            let fm = loss_fn(&work)?;
            *g = (fp - fm) / (2.0 * step);
        }
        work.set(&name, tensor.clone())?;
        out.insert(name, Tensor::raw(tensor.shape().to_vec(), grad));
    }
    Ok(out)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient maps, with the entry name.
pub fn max_rel_error(
    analytic: &IndexMap<String, Tensor>,
    numeric: &IndexMap<String, Tensor>,
    floor: f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else {
            return (f64::INFINITY, name.clone());
        };
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_error(x, y, floor);
            if e > worst.0 || !e.is_finite() {
                worst = (e, format!("{name}[{i}]"));
            }
        }
    }
    worst
}
