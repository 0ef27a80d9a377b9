//! Compares tape gradients of a two-level cascade with central finite
//! differences.

use patchicl::cascade::{forward_graph, total_loss_graph, CascadeConfig, LevelConfig};
use patchicl::data::{generate_episode, DataConfig, ShapeClass};
use patchicl::model::{init_params, ModelConfig};
use patchicl::numerics::{finite_diff_grad, max_rel_error, Graph, RngStream};

fn main() -> patchicl::Result<()> {
    let level = |resolution| LevelConfig { resolution, k_target: 2, k_context: 1, patch_size: 8, stride: 8 };
    let cfg = CascadeConfig {
        levels: vec![level(8), level(16)],
        model: ModelConfig { d: 8, layers: 2, heads: 2, patch_size: 8, enc_channels: [4, 8] },
        noise_enabled: false,
    };
    let task = generate_episode(ShapeClass::Disk, 0, 32, &ShapeClass::ALL, &DataConfig::default(), &mut RngStream::new(0, 0))?.resampled(16)?;
    let params = init_params(&cfg.model, &mut RngStream::new(1, 0))?;
    let rng = RngStream::new(2, 0);
    let loss = |p: &_| -> patchicl::Result<_> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let traces = forward_graph(&mut g, &b, &task, &cfg, &rng)?;
        let (total, _) = total_loss_graph(&mut g, &traces, &task.target_mask)?;
        Ok((g.value(total).item()?, g.backward(total, p)?))
    };
    let (value, analytic) = loss(&params)?;
    let numeric = finite_diff_grad(|p| Ok(loss(p)?.0), &params, 1e-5)?;
    let (err, at) = max_rel_error(&analytic, &numeric, 1e-6);
    println!("loss {value:.6}, {} parameters, worst relative error {err:.2e} at {at}", params.num_scalars());
    Ok(())
}
