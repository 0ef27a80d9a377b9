//! Trains the cascade for a few hundred steps on generated episodes and
//! reports held-out Dice before and after.
//!
//! `cargo run --release --example train_patchicl -- 600`

use patchicl::cascade::CascadeConfig;
use patchicl::data::{ClassSplit, DataConfig, DatasetManifest, Split};
use patchicl::evalcost::{evaluate_patchicl, DiceResult};
use patchicl::train::{train, ModelSpec, TrainConfig, TrainState};

fn main() -> patchicl::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let m = DatasetManifest::plan(7, 64, 160, 0.25, ClassSplit::default(), DataConfig::default())?;
    let load = |split| m.entries(split).map(|e| m.generate(e)).collect::<patchicl::Result<Vec<_>>>();
    let (train_set, test_set) = (load(Split::Train)?, load(Split::HeldOut)?);
    let cfg = CascadeConfig::default();
    let eval_cfg = CascadeConfig { noise_enabled: false, ..cfg.clone() };
    let spec = ModelSpec::PatchIcl(cfg);
    let mut state = TrainState::fresh(&spec, 0)?;
    let dice = |state: &TrainState| -> patchicl::Result<DiceResult> {
        DiceResult::from_scores(evaluate_patchicl(&test_set, &eval_cfg, &state.params, 0, 1)?)
    };
    println!("before: held-out Dice {:.3}", dice(&state)?.mean);
    train(&spec, &TrainConfig { steps, ..Default::default() }, 0, &train_set, &mut state, |log, _| {
        if log.step % 50 == 0 {
            println!("step {:>5}  loss {:.4}", log.step, log.total);
        }
        Ok(())
    })?;
    let d = dice(&state)?;
    println!("after {steps} steps: held-out Dice {:.3} ± {:.3}", d.mean, d.std);
    Ok(())
}
