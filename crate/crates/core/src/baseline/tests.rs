use super::*;
use crate::cascade::level_loss_graph;
use crate::data::{generate_episode, DataConfig, ShapeClass};
use crate::numerics::{finite_diff_grad, max_rel_error};

fn task(r: usize) -> TaskInstance {
    generate_episode(
        ShapeClass::Cross,
        1,
        r,
        &ShapeClass::ALL,
        &DataConfig::default(),
        &mut RngStream::new(4, 0),
    )
    .unwrap()
}

fn small(resolution: usize) -> GlobalModelConfig {
    GlobalModelConfig {
        d: 8,
        layers: 2,
        heads: 1,
        enc_channels: [3, 4],
        resolution,
        cap: DEFAULT_CAP,
    }
}

#[test]
fn output_contract() {
    let cfg = small(16);
    let params = init_global_params(&cfg, &mut RngStream::new(1, 0)).unwrap();
    let t = task(32);
    let a = global_forward(&t, &cfg, &params).unwrap();
    let b = global_forward(&t, &cfg, &params).unwrap();
    assert_eq!(a.shape(), &[32, 32]);
    assert!(a.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(a, b);
}

#[test]
fn resolution_cap() {
    let cfg = GlobalModelConfig {
        resolution: 256,
        ..small(16)
    };
    let err = cfg.validate().unwrap_err();
    assert!(matches!(err, Error::ResolutionCap { resolution: 256, cap: 128 }));
    assert!(err.to_string().contains("analytic cost model"));
}

#[test]
fn context_changes_prediction() {
    let cfg = small(16);
    let params = init_global_params(&cfg, &mut RngStream::new(2, 0)).unwrap();
    let t = task(16);
    let mut flipped = t.clone();
    for c in flipped.context.iter_mut() {
        c.mask = c.mask.map(|v| 1.0 - v);
    }
    assert_ne!(global_forward(&t, &cfg, &params).unwrap(), global_forward(&flipped, &cfg, &params).unwrap());
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = small(8);
    let mut params = init_global_params(&cfg, &mut RngStream::new(3, 0)).unwrap();
    let mut rng = RngStream::new(5, 0);
    params.set("dec.out.w", Tensor::from_fn(&[1, 4, 1, 1], |_| 0.5 * rng.normal())).unwrap();
    let t = task(16).resampled(8).unwrap();
    let loss_at = |p: &ParamSet| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let z = global_logits_graph(&mut g, &b, &cfg, &t)?;
        let l = level_loss_graph(&mut g, z, &t.target_mask)?;
        Ok((g, l))
    };
    let (g, loss) = loss_at(&params).unwrap();
    let analytic = g.backward(loss, &params).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let (g, l) = loss_at(p)?;
            g.value(l).item()
        },
        &params,
        1e-5,
    )
    .unwrap();
    let (err, at) = max_rel_error(&analytic, &numeric, 1e-6);
    assert!(err <= 1e-4, "rel error {err} at {at}");
}
