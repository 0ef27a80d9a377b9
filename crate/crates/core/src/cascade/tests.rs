use super::*;
use crate::data::{generate_episode, DataConfig, ShapeClass};
use crate::model::init_params;
use crate::numerics::{finite_diff_grad, max_rel_error};

fn tiny_cfg() -> CascadeConfig {
    let level = |resolution, k_target| LevelConfig {
        resolution,
        k_target,
        k_context: 2,
        patch_size: 4,
        stride: 4,
    };
    CascadeConfig {
        levels: vec![level(8, 4), level(16, 4)],
        model: ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            patch_size: 4,
            enc_channels: [4, 8],
        },
        noise_enabled: false,
    }
}

fn task(r: usize, seed: u64) -> TaskInstance {
    generate_episode(
        ShapeClass::Disk,
        seed,
        r,
        &ShapeClass::ALL,
        &DataConfig::default(),
        &mut RngStream::new(seed, 0),
    )
    .unwrap()
}

/// Per-pixel mean over the patches covering it, by direct enumeration.
fn brute_aggregate(patches: &[(PatchBox, Tensor)], r: usize) -> Vec<f64> {
    (0..r * r)
        .map(|i| {
            let (y, x) = (i / r, i % r);
            let vals: Vec<f64> = patches
                .iter()
                .filter(|(b, _)| b.contains(y, x))
                .map(|(b, t)| t.at2(y - b.y0, x - b.x0))
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().fold(0.0, |a, v| a + v) / vals.len() as f64
            }
        })
        .collect()
}

#[test]
fn aggregate_examples() {
    let b = PatchBox { y0: 0, x0: 0, size: 2 };
    let (l, c) = aggregate_patches(&[(b, Tensor::full(&[2, 2], 0.7))], 4).unwrap();
    assert_eq!(l.at2(1, 1), 0.7);
    assert_eq!(c.at2(1, 1), 1.0);
    assert_eq!((l.at2(3, 3), c.at2(3, 3)), (0.0, 0.0));
    let b2 = PatchBox { y0: 1, x0: 1, size: 2 };
    let (l, _) = aggregate_patches(&[(b, Tensor::full(&[2, 2], 0.2)), (b2, Tensor::full(&[2, 2], 0.8))], 4).unwrap();
    assert_eq!(l.at2(1, 1), 0.5);
    let oob = PatchBox { y0: 3, x0: 0, size: 2 };
    assert!(aggregate_patches(&[(oob, Tensor::zeros(&[2, 2]))], 4).is_err());
}

#[test]
fn aggregate_matches_brute_force() {
    let mut rng = RngStream::new(1, 0);
    for _ in 0..2000 {
        let r = 2 + rng.index(15);
        let n = 1 + rng.index(5);
        let patches: Vec<(PatchBox, Tensor)> = (0..n)
            .map(|_| {
                let size = 1 + rng.index(r);
                let b = PatchBox {
                    y0: rng.index(r - size + 1),
                    x0: rng.index(r - size + 1),
                    size,
                };
                (b, Tensor::from_fn(&[size, size], |_| rng.normal()))
            })
            .collect();
        let (l, c) = aggregate_patches(&patches, r).unwrap();
        assert_eq!(l.data(), brute_aggregate(&patches, r).as_slice());
        for i in 0..r * r {
            let covered = patches.iter().any(|(b, _)| b.contains(i / r, i % r));
            assert_eq!(c.data()[i], covered as u8 as f64);
        }
    }
}

#[test]
fn fuse_examples() {
    let prev = Tensor::full(&[2, 2], 1.0);
    let level = Tensor::full(&[4, 4], 0.5);
    let cov = Tensor::from_fn(&[4, 4], |i| (i / 4 < 2 && i % 4 < 2) as u8 as f64);
    let out = fuse_levels(&prev, &level, &cov).unwrap();
    for i in 0..16 {
        let expected = if i / 4 < 2 && i % 4 < 2 { 1.5 } else { 1.0 };
        assert_eq!(out.data()[i], expected);
    }
    let zero = fuse_levels(&prev, &Tensor::zeros(&[4, 4]), &cov).unwrap();
    assert_eq!(zero, Tensor::full(&[4, 4], 1.0));
    let masked = fuse_levels(&prev, &level, &Tensor::zeros(&[4, 4])).unwrap();
    assert_eq!(masked, Tensor::full(&[4, 4], 1.0));
    assert!(fuse_levels(&prev, &level, &Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn level_loss_examples() {
    let gt = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
    let perfect = gt.map(|y| if y == 1.0 { 20.0 } else { -20.0 });
    assert!(level_loss(&perfect, &gt).unwrap() < 1e-6);

    let zeros = Tensor::zeros(&[4, 4]);
    let (n, s) = (16.0, gt.sum());
    let dice = 1.0 - (2.0 * 0.5 * s + 1.0) / (0.5 * n + s + 1.0);
    assert!((level_loss(&zeros, &gt).unwrap() - (std::f64::consts::LN_2 + dice)).abs() <= 1e-15);

    let p = [0.9f64, 0.8, 0.1, 0.2];
    let logits = Tensor::new(vec![2, 2], p.iter().map(|q| (q / (1.0 - q)).ln()).collect()).unwrap();
    let y = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let bce = -(0.9f64.ln() + 0.8f64.ln() + 0.9f64.ln() + 0.8f64.ln()) / 4.0;
    let dice = 1.0 - (2.0 * 1.7 + 1.0) / (2.0 + 2.0 + 1.0);
    assert!((level_loss(&logits, &y).unwrap() - (bce + dice)).abs() <= 1e-12);

    assert!(level_loss(&zeros, &Tensor::full(&[4, 4], 0.5)).is_err());
    assert!(level_loss(&zeros, &Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn first_level_with_full_k_covers_everything() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg.model, &mut RngStream::new(2, 0)).unwrap();
    let t = task(16, 3).resampled(8).unwrap();
    let pred = run_level(&t, &cfg.levels[0], None, &cfg, &params, &RngStream::new(0, 0)).unwrap();
    assert!(pred.coverage.data().iter().all(|&c| c == 1.0));
    assert_eq!(pred.combined, pred.logits);
}

#[test]
fn confident_previous_level_falls_back_to_uniform() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg.model, &mut RngStream::new(2, 0)).unwrap();
    let t = task(16, 4);
    let first = run_level(&t.resampled(8).unwrap(), &cfg.levels[0], None, &cfg, &params, &RngStream::new(0, 0)).unwrap();
    let confident = LevelPrediction {
        combined: Tensor::full(&[8, 8], 800.0),
        ..first
    };
    let pred = run_level(&t, &cfg.levels[1], Some(&confident), &cfg, &params, &RngStream::new(0, 1)).unwrap();
    assert!(pred.patches.weights.iter().all(|&w| w == 1.0));
    assert_eq!(pred.patches.selected.len(), 4);
}

#[test]
fn uncertain_quadrant_attracts_all_patches() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg.model, &mut RngStream::new(5, 0)).unwrap();
    let t = task(16, 6);
    let first = run_level(&t.resampled(8).unwrap(), &cfg.levels[0], None, &cfg, &params, &RngStream::new(0, 0)).unwrap();
    // confident everywhere except the bottom-right quadrant
    let prev = LevelPrediction {
        combined: Tensor::from_fn(&[8, 8], |i| if i / 8 >= 4 && i % 8 >= 4 { 0.0 } else { 30.0 }),
        ..first
    };
    let pred = run_level(&t, &cfg.levels[1], Some(&prev), &cfg, &params, &RngStream::new(0, 1)).unwrap();
    for b in pred.patches.boxes() {
        assert!(b.y0 >= 8 && b.x0 >= 8, "{b:?}");
    }
}

#[test]
fn forward_shapes_and_determinism() {
    let mut cfg = tiny_cfg();
    cfg.noise_enabled = true;
    let params = init_params(&cfg.model, &mut RngStream::new(7, 0)).unwrap();
    let t = task(32, 8);
    let a = forward(&t, &cfg, &params, &RngStream::new(1, 2)).unwrap();
    let b = forward(&t, &cfg, &params, &RngStream::new(1, 2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.levels.len(), 2);
    assert_eq!(a.levels.iter().map(|l| l.resolution).collect::<Vec<_>>(), vec![8, 16]);
    assert_eq!(a.final_prob.shape(), &[32, 32]);
    assert!(a.final_prob.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    for l in &a.levels {
        for (&v, &c) in l.logits.data().iter().zip(l.coverage.data()) {
            assert!(c == 1.0 || v == 0.0);
        }
    }
    // fresh draws pick different context patches somewhere
    let c = forward(&t, &cfg, &params, &RngStream::new(2, 2)).unwrap();
    assert!(a.levels.iter().zip(&c.levels).any(|(x, y)| x.context_patches != y.context_patches));
}

#[test]
fn single_level_cascade() {
    let mut cfg = tiny_cfg();
    cfg.levels.truncate(1);
    let params = init_params(&cfg.model, &mut RngStream::new(9, 0)).unwrap();
    let t = task(16, 10);
    let pyr = forward(&t, &cfg, &params, &RngStream::new(0, 0)).unwrap();
    assert_eq!(pyr.levels.len(), 1);
    let gt = kernels::resample_mask(&t.target_mask, 8).unwrap();
    assert_eq!(total_loss(&pyr, &t.target_mask).unwrap(), level_loss(&pyr.levels[0].combined, &gt).unwrap());
}

#[test]
fn total_loss_is_sum_of_levels() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg.model, &mut RngStream::new(11, 0)).unwrap();
    let t = task(16, 12);
    let pyr = forward(&t, &cfg, &params, &RngStream::new(0, 0)).unwrap();
    let by_hand: f64 = pyr
        .levels
        .iter()
        .map(|l| level_loss(&l.combined, &kernels::resample_mask(&t.target_mask, l.resolution).unwrap()).unwrap())
        .sum();
    assert!((total_loss(&pyr, &t.target_mask).unwrap() - by_hand).abs() <= 1e-12);

    // the graph version agrees with the frozen one
    let mut g = Graph::new();
    let b = g.bind(&params);
    let traces = forward_graph(&mut g, &b, &t, &cfg, &RngStream::new(0, 0)).unwrap();
    let (total, per_level) = total_loss_graph(&mut g, &traces, &t.target_mask).unwrap();
    assert_eq!(per_level.len(), 2);
    assert!((g.value(total).item().unwrap() - by_hand).abs() <= 1e-12);
}

#[test]
fn config_validation() {
    assert!(CascadeConfig::default().validate().is_ok());
    let mut c = tiny_cfg();
    c.levels.swap(0, 1);
    assert!(c.validate().is_err());
    let mut c = tiny_cfg();
    c.levels.clear();
    assert!(c.validate().is_err());
    let mut c = tiny_cfg();
    c.levels[0].patch_size = 2;
    assert!(c.validate().is_err());
}

#[test]
fn cascade_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut params = init_params(&cfg.model, &mut RngStream::new(13, 0)).unwrap();
    let mut rng = RngStream::new(14, 0);
    params.set("dec.out.w", Tensor::from_fn(&[1, 8, 1, 1], |_| 0.5 * rng.normal())).unwrap();
    let t = task(16, 15);
    let loss_at = |p: &ParamSet| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let traces = forward_graph(&mut g, &b, &t, &cfg, &RngStream::new(0, 0))?;
        let (total, _) = total_loss_graph(&mut g, &traces, &t.target_mask)?;
        Ok((g, total))
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
