use super::*;
use crate::error::{Error, Result};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Compares tape gradients with central differences for an op applied to
/// randomly drawn inputs, reduced by a random weighting to a scalar.
fn check_op(name: &str, inputs: &[(&str, &[usize], f64, f64)], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed, 99);
        let mut params = ParamSet::new();
        for (n, shape, lo, hi) in inputs {
            params.insert(n, random(shape, &mut rng, *lo, *hi)).unwrap();
        }
        let weight_seed = rng.next_u64();
        let eval = |p: &ParamSet, want_grad: bool| -> Result<(f64, Option<indexmap::IndexMap<String, Tensor>>)> {
            let mut g = Graph::new();
            let bound = g.bind(p);
            let vars: Vec<Var> = inputs.iter().map(|(n, ..)| bound.get(n).unwrap()).collect();
            let out = op(&mut g, &vars)?;
            let mut wr = RngStream::new(weight_seed, 0);
            let w = g.constant(random(g.shape(out).to_vec().as_slice(), &mut wr, -1.0, 1.0));
            let prod = g.mul(out, w)?;
            let loss = g.sum(prod)?;
            let value = g.value(loss).item()?;
            let grads = if want_grad { Some(g.backward(loss, p)?) } else { None };
            Ok((value, grads))
        };
        let analytic = eval(&params, true).unwrap().1.unwrap();
        let numeric = finite_diff_grad(|p| Ok(eval(p, false)?.0), &params, 1e-5).unwrap();
        let (err, at) = max_rel_error(&analytic, &numeric, FLOOR);
        assert!(err <= TOL, "{name} seed {seed}: rel error {err:e} at {at}");
    }
}

#[test]
fn grad_elementwise_binary() {
    check_op("add", &[("a", &[3, 4], -1.0, 1.0), ("b", &[4], -1.0, 1.0)], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[("a", &[4], -1.0, 1.0), ("b", &[2, 4], -1.0, 1.0)], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[("a", &[2, 3], -1.0, 1.0), ("b", &[2, 3], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]));
    check_op("div", &[("a", &[2, 3], -1.0, 1.0), ("b", &[3], 0.5, 2.0)], |g, v| g.div(v[0], v[1]));
    check_op("scalar-broadcast", &[("a", &[5], -1.0, 1.0), ("b", &[], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn grad_unary() {
    let x: &[(&str, &[usize], f64, f64)] = &[("x", &[7], -2.0, 2.0)];
    check_op("exp", x, |g, v| g.exp(v[0]));
    check_op("sigmoid", x, |g, v| g.sigmoid(v[0]));
    check_op("tanh", x, |g, v| g.tanh(v[0]));
    check_op("gelu", x, |g, v| g.gelu(v[0]));
    check_op("softplus", x, |g, v| g.softplus(v[0]));
    check_op("square", x, |g, v| g.square(v[0]));
    check_op("scale", x, |g, v| g.scale(v[0], -1.7));
    check_op("add_scalar", x, |g, v| g.add_scalar(v[0], 0.3));
    check_op("log", &[("x", &[7], 0.2, 3.0)], |g, v| g.log(v[0]));
    check_op("relu", &[("x", &[7], 0.1, 2.0)], |g, v| g.relu(v[0]));
}

#[test]
fn grad_reductions_and_shape() {
    check_op("sum", &[("x", &[3, 2], -1.0, 1.0)], |g, v| g.sum(v[0]));
    check_op("mean", &[("x", &[3, 2], -1.0, 1.0)], |g, v| g.mean(v[0]));
    check_op("sum_axis", &[("x", &[2, 3, 4], -1.0, 1.0)], |g, v| g.sum_axis(v[0], 1));
    check_op("mean_axis", &[("x", &[2, 3, 4], -1.0, 1.0)], |g, v| g.mean_axis(v[0], 2));
    check_op("reshape", &[("x", &[2, 6], -1.0, 1.0)], |g, v| g.reshape(v[0], &[3, 4]));
    check_op("permute", &[("x", &[2, 3, 4], -1.0, 1.0)], |g, v| g.permute(v[0], &[1, 2, 0]));
    check_op("transpose", &[("x", &[2, 3, 4], -1.0, 1.0)], |g, v| g.transpose(v[0]));
    check_op("concat_rows", &[("a", &[2, 3], -1.0, 1.0), ("b", &[1, 3], -1.0, 1.0)], |g, v| {
        g.concat_rows(&[v[0], v[1]])
    });
    check_op("slice_rows", &[("x", &[5, 2], -1.0, 1.0)], |g, v| g.slice_rows(v[0], 1, 3));
    check_op("broadcast_spatial", &[("x", &[2, 3], -1.0, 1.0)], |g, v| g.broadcast_spatial(v[0], 2, 3));
}

#[test]
fn grad_linear_algebra() {
    check_op("matmul", &[("a", &[3, 4], -1.0, 1.0), ("b", &[4, 5], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul-wide", &[("a", &[2, 3], -1.0, 1.0), ("b", &[3, 17], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul-batched", &[("a", &[2, 3, 4], -1.0, 1.0), ("b", &[2, 4, 2], -1.0, 1.0)], |g, v| {
        g.matmul(v[0], v[1])
    });
    check_op("matmul-shared", &[("a", &[2, 3, 4], -1.0, 1.0), ("b", &[4, 2], -1.0, 1.0)], |g, v| {
        g.matmul(v[0], v[1])
    });
    check_op("softmax", &[("x", &[3, 5], -2.0, 2.0)], |g, v| g.softmax(v[0]));
    check_op(
        "attention",
        &[("q", &[2, 3, 4], -0.5, 0.5), ("k", &[2, 5, 4], -0.5, 0.5), ("v", &[2, 5, 3], -0.5, 0.5)],
        |g, v| g.attention(v[0], v[1], v[2], 0.5),
    );
    check_op(
        "layer_norm",
        &[("x", &[3, 6], -2.0, 2.0), ("g", &[6], 0.5, 1.5), ("b", &[6], -0.5, 0.5)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn grad_image_ops() {
    check_op(
        "conv2d-3x3",
        &[("x", &[2, 2, 4, 5], -1.0, 1.0), ("w", &[3, 2, 3, 3], -1.0, 1.0), ("b", &[3], -1.0, 1.0)],
        |g, v| g.conv2d(v[0], v[1], v[2]),
    );
    check_op(
        "conv2d-1x1",
        &[("x", &[1, 3, 3, 3], -1.0, 1.0), ("w", &[2, 3, 1, 1], -1.0, 1.0), ("b", &[2], -1.0, 1.0)],
        |g, v| g.conv2d(v[0], v[1], v[2]),
    );
    check_op("resize_up", &[("x", &[2, 3, 3], -1.0, 1.0)], |g, v| g.resize_bilinear(v[0], 7, 5));
    check_op("resize_down", &[("x", &[6, 6], -1.0, 1.0)], |g, v| g.resize_bilinear(v[0], 4, 3));
    check_op("place_patches", &[("p", &[3, 2, 2], -1.0, 1.0)], |g, v| {
        g.place_patches(v[0], &[(0, 0), (1, 1), (2, 0)], 4)
    });
    let cos = Tensor::from_fn(&[3, 2], |i| (0.3 * i as f64).cos());
    let sin = Tensor::from_fn(&[3, 2], |i| (0.3 * i as f64).sin());
    check_op("rotary", &[("x", &[2, 3, 4], -1.0, 1.0)], move |g, v| g.rotary(v[0], &cos, &sin));
}

#[test]
fn composite_network_matches_finite_differences() {
    // two-layer perceptron with layer norm and softmax readout
    check_op(
        "mlp",
        &[
            ("x", &[4, 3], -1.0, 1.0),
            ("w1", &[3, 5], -1.0, 1.0),
            ("b1", &[5], -0.5, 0.5),
            ("g", &[5], 0.5, 1.5),
            ("beta", &[5], -0.5, 0.5),
            ("w2", &[5, 2], -1.0, 1.0),
        ],
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.gelu(h)?;
            let h = g.layer_norm(h, v[3], v[4], 1e-5)?;
            let o = g.matmul(h, v[5])?;
            g.softmax(o)
        },
    );
}

#[test]
fn fused_attention_matches_composed_ops() {
    let mut rng = RngStream::new(4, 4);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal());
    let (q, k, v) = (rand(&[2, 6, 4]), rand(&[2, 9, 4]), rand(&[2, 9, 5]));
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
    let fused = g.attention(q, k, v, 0.5).unwrap();
    let kt = g.transpose(k).unwrap();
    let s = g.matmul(q, kt).unwrap();
    let s = g.scale(s, 0.5).unwrap();
    let p = g.softmax(s).unwrap();
    let composed = g.matmul(p, v).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(composed)) < 1e-14);

    let mut params = ParamSet::new();
    for (n, shape) in [("q", [2, 6, 4]), ("k", [2, 9, 4]), ("v", [2, 9, 5])] {
        params.insert(n, rand(&shape)).unwrap();
    }
    let w = rand(&[2, 6, 5]);
    let grads = |fused: bool| {
        let mut g = Graph::new();
        let b = g.bind(&params);
        let (q, k, v) = (b.get("q").unwrap(), b.get("k").unwrap(), b.get("v").unwrap());
        let out = if fused {
            g.attention(q, k, v, 0.5).unwrap()
        } else {
            let kt = g.transpose(k).unwrap();
            let s = g.matmul(q, kt).unwrap();
            let s = g.scale(s, 0.5).unwrap();
            let p = g.softmax(s).unwrap();
            g.matmul(p, v).unwrap()
        };
        let w = g.constant(w.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss, &params).unwrap()
    };
    let (a, b) = (grads(true), grads(false));
    for (name, ga) in &a {
        assert!(ga.max_abs_diff(&b[name]) < 1e-13, "{name}");
    }
}

#[test]
fn op_examples() {
    let mut g = Graph::new();
    let z = g.scalar(0.0);
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 0.5);

    let zeros = g.constant(Tensor::zeros(&[3]));
    let sm = g.softmax(zeros).unwrap();
    for &v in g.value(sm).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let mut rng = RngStream::new(3, 0);
    let a = random(&[3, 3], &mut rng, -1.0, 1.0);
    let eye = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let prod = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(prod), &a);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
}

#[test]
fn non_finite_outputs_are_rejected_in_debug() {
    if !cfg!(debug_assertions) {
        return;
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], -1.0));
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn backward_examples() {
    // loss = sum(p∘p) at p = [1, 2, 3]
    let mut params = ParamSet::new();
    params.insert("p", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let b = g.bind(&params);
    let p = b.get("p").unwrap();
    let sq = g.mul(p, p).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss, &params).unwrap();
    assert_eq!(grads["p"].data(), &[2.0, 4.0, 6.0]);

    // loss = sigmoid(w)·x at w = 0, x = 2
    let mut params = ParamSet::new();
    params.insert("w", Tensor::scalar(0.0)).unwrap();
    let mut g = Graph::new();
    let b = g.bind(&params);
    let w = b.get("w").unwrap();
    let s = g.sigmoid(w).unwrap();
    let x = g.scalar(2.0);
    let loss = g.mul(s, x).unwrap();
    let grads = g.backward(loss, &params).unwrap();
    assert!((grads["w"].item().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn backward_errors_and_unused_params() {
    let mut params = ParamSet::new();
    params.insert("used", Tensor::scalar(1.5)).unwrap();
    params.insert("unused", Tensor::zeros(&[2])).unwrap();
    let mut g = Graph::new();
    let b = g.bind(&params);
    let u = b.get("used").unwrap();
    let loss = g.square(u).unwrap();
    let grads = g.backward(loss, &params).unwrap();
    assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    assert_eq!(grads["used"].item().unwrap(), 3.0);

    let vec_out = g.constant(Tensor::zeros(&[2]));
    let nonscalar = g.add(vec_out, u).unwrap();
    assert!(matches!(g.backward(nonscalar, &params), Err(Error::NotScalar(_))));

    let detached = g.scalar(1.0);
    assert!(matches!(g.backward(detached, &params), Err(Error::Detached)));
}

#[test]
fn resampling_properties() {
    let mut rng = RngStream::new(11, 0);
    let x = random(&[8, 8], &mut rng, 0.0, 1.0);
    let down = kernels::resample_image(&x, 4).unwrap();
    let up = kernels::resize_map(&down, 8, 8).unwrap();
    assert_eq!(up.shape(), x.shape());
    let c = Tensor::full(&[4, 4], 0.3);
    let n = kernels::resize_nearest(&c, 12, 12).unwrap();
    assert!(n.data().iter().all(|&v| v == 0.3));
}
