//! One untrained forward pass through the three-level cascade, showing
//! which patches each level looked at and how much of the image they
//! cover.

use patchicl::cascade::{forward, CascadeConfig};
use patchicl::data::{generate_episode, DataConfig, ShapeClass};
use patchicl::model::init_params;
use patchicl::numerics::RngStream;

fn main() -> patchicl::Result<()> {
    let cfg = CascadeConfig::default();
    let params = init_params(&cfg.model, &mut RngStream::new(0, 0))?;
    let task = generate_episode(ShapeClass::Ring, 3, 64, &ShapeClass::ALL, &DataConfig::default(), &mut RngStream::new(0, 3))?;
    let pyramid = forward(&task, &cfg, &params, &RngStream::new(0, 1))?;
    for (l, level) in pyramid.levels.iter().enumerate() {
        let covered = level.coverage.data().iter().filter(|&&c| c > 0.0).count();
        println!(
            "level {l}: {}×{0}, {} target patches, {:.1}% of pixels covered",
            level.resolution,
            level.patches.selected.len(),
            100.0 * covered as f64 / level.coverage.len() as f64
        );
        for b in level.patches.boxes() {
            println!("    box y={} x={} size={}", b.y0, b.x0, b.size);
        }
    }
    println!("final map {:?}, mean probability {:.3}", pyramid.final_prob.shape(), pyramid.final_prob.mean());
    Ok(())
}
