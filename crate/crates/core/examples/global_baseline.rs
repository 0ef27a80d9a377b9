//! The dense baseline: every pixel of a 32×32 working grid is a token. Runs
//! a few training steps and prints the per-step loss.

use patchicl::baseline::{global_forward, GlobalModelConfig};
use patchicl::data::{generate_episode, DataConfig, ShapeClass};
use patchicl::evalcost::dice_score;
use patchicl::numerics::RngStream;
use patchicl::train::{train, ModelSpec, TrainConfig, TrainState};

fn main() -> patchicl::Result<()> {
    let cfg = GlobalModelConfig::default();
    let episodes = (0..4)
        .map(|i| generate_episode(ShapeClass::ALL[i as usize], i, 64, &ShapeClass::ALL[..4], &DataConfig::default(), &mut RngStream::new(2, i)))
        .collect::<patchicl::Result<Vec<_>>>()?;
    let spec = ModelSpec::Global(cfg.clone());
    let mut state = TrainState::fresh(&spec, 0)?;
    println!("{} tokens per image, {} parameters", cfg.tokens_per_image(), state.params.num_scalars());
    train(&spec, &TrainConfig { steps: 10, ..Default::default() }, 0, &episodes, &mut state, |log, _| {
        println!("step {:>2}  loss {:.4}", log.step, log.total);
        Ok(())
    })?;
    let prob = global_forward(&episodes[0], &cfg, &state.params)?;
    println!("Dice on episode 0: {:.3}", dice_score(&prob, &episodes[0].target_mask)?);
    let too_big = GlobalModelConfig { resolution: 256, ..cfg };
    if let Err(e) = too_big.validate() {
        println!("{e}");
    }
    Ok(())
}
