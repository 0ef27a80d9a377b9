//! Analytic cost of both architectures from 64 to 512 pixels, with the
//! log-log slopes of the attention terms and the crossover resolution.

use patchicl::baseline::GlobalModelConfig;
use patchicl::cascade::CascadeConfig;
use patchicl::evalcost::{benchmark_sweep, crossover, log_log_slope, sweep_csv, Arch};

fn main() -> patchicl::Result<()> {
    let res = [64, 128, 256, 512];
    let rows = benchmark_sweep(&res, &CascadeConfig::default(), &GlobalModelConfig::default(), 3, None)?;
    print!("{}", sweep_csv(&rows));
    let xs: Vec<f64> = res.iter().map(|&r| r as f64).collect();
    for arch in [Arch::PatchIcl, Arch::Global] {
        let att: Vec<f64> = rows.iter().filter(|r| r.flops.arch == arch).map(|r| r.flops.attention).collect();
        println!("{} attention slope: {:.3}", arch.name(), log_log_slope(&xs, &att));
    }
    println!("crossover: {:?}", crossover(&rows));
    Ok(())
}
