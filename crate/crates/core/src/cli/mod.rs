//! The `patchicl` command line: dataset generation, training, evaluation
//! and the cost sweep. Every command resolves its settings, writes them to
//! `run.lock` in the output directory, and can be replayed from that file.

mod settings;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::global_forward;
use crate::cascade::forward;
use crate::data::{write_pgm, Dataset, DatasetManifest, Split, TaskInstance};
use crate::error::{Error, Result};
use crate::evalcost::{
    benchmark_sweep, crossover, evaluate_global, evaluate_patchicl, sweep_csv, DiceResult, SweepModels,
};
use crate::numerics::{kernels, ParamSet, RngStream, Tensor};
use crate::sampling::PatchBox;
use crate::train::{train_to_dir, ModelSpec, TrainState};

pub use settings::Settings;

pub const LOCK_FILE: &str = "run.lock";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_EPISODES_CSV: &str = "eval_episodes.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "patchicl", version, about = "Hierarchical in-context segmentation on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Settings file (`key = value` lines); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for generation, evaluation and the sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override any setting.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        held_out_fraction: Option<f64>,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `patchicl` or `global`.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dice of a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `held_out` or `train`.
        #[arg(long)]
        split: Option<String>,
        /// Permit evaluation on the train split.
        #[arg(long)]
        allow_train: bool,
        /// Write image / mask / prediction strips for the first N episodes.
        #[arg(long, value_name = "N", num_args = 0..=1, default_missing_value = "8")]
        dump_patches: Option<usize>,
    },
    /// Analytic FLOPs (and optionally Dice) of both architectures across
    /// resolutions.
    BenchFlops {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, e.g. `64,128,256,512`.
        #[arg(long)]
        resolutions: Option<String>,
        /// Skip Dice evaluation; no checkpoints needed.
        #[arg(long)]
        cost_only: bool,
        #[arg(long)]
        patchicl_checkpoint: Option<PathBuf>,
        #[arg(long)]
        global_checkpoint: Option<PathBuf>,
        /// Held-out episodes per resolution.
        #[arg(long)]
        episodes: Option<usize>,
    },
}

struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn new(common: &Common) -> Result<Self> {
        let mut o = Overrides(Vec::new());
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            o.0.push((k.trim().to_string(), v.trim().to_string()));
        }
        o.opt("seed", &common.seed);
        o.opt("jobs", &common.jobs);
        o.path("out", &common.out);
        Ok(o)
    }

    fn opt<T: ToString>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.to_string()));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        if let Some(p) = v {
            self.0.push((key.to_string(), p.display().to_string()));
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.push((key.to_string(), "true".into()));
        }
    }
}

/// Resolves settings for a parsed command line.
pub fn resolve(cli: &Cli) -> Result<Settings> {
    let (common, o) = match &cli.command {
        Command::MakeData {
            common,
            resolution,
            episodes,
            held_out_fraction,
        } => {
            let mut o = Overrides::new(common)?;
            o.opt("data.resolution", resolution);
            o.opt("data.episodes", episodes);
            o.opt("data.held_out_fraction", held_out_fraction);
            (common, o)
        }
        Command::Train {
            common,
            data,
            arch,
            steps,
            lr,
            checkpoint_every,
            resume,
        } => {
            let mut o = Overrides::new(common)?;
            o.path("data.dir", data);
            o.opt("arch", arch);
            o.opt("train.steps", steps);
            o.opt("train.lr", lr);
            o.opt("train.checkpoint_every", checkpoint_every);
            o.path("train.resume", resume);
            (common, o)
        }
        Command::Eval {
            common,
            data,
            arch,
            checkpoint,
            split,
            allow_train,
            dump_patches,
        } => {
            let mut o = Overrides::new(common)?;
            o.path("data.dir", data);
            o.opt("arch", arch);
            o.path("eval.checkpoint", checkpoint);
            o.opt("eval.split", split);
            o.flag("eval.allow_train", *allow_train);
            o.opt("eval.dump_patches", dump_patches);
            (common, o)
        }
        Command::BenchFlops {
            common,
            resolutions,
            cost_only,
            patchicl_checkpoint,
            global_checkpoint,
            episodes,
        } => {
            let mut o = Overrides::new(common)?;
            o.opt("bench.resolutions", resolutions);
            o.flag("bench.cost_only", *cost_only);
            o.path("bench.patchicl_checkpoint", patchicl_checkpoint);
            o.path("bench.global_checkpoint", global_checkpoint);
            o.opt("bench.episodes", episodes);
            (common, o)
        }
    };
    Settings::resolve(common.config.as_deref(), &o.0)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let s = resolve(cli)?;
    match cli.command {
        Command::MakeData { .. } => make_data(&s),
        Command::Train { .. } => train(&s),
        Command::Eval { .. } => eval(&s),
        Command::BenchFlops { .. } => bench_flops(&s),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn prepare_out(s: &Settings) -> Result<PathBuf> {
    let out = s.out();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let lock = out.join(LOCK_FILE);
    fs::write(&lock, s.render()).map_err(|e| Error::io(&lock, e))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn make_data(s: &Settings) -> Result<()> {
    let manifest = DatasetManifest::plan(
        s.seed()?,
        s.get("data.resolution")?,
        s.get("data.episodes")?,
        s.get("data.held_out_fraction")?,
        s.class_split()?,
        s.data_config()?,
    )?;
    let jobs = s.jobs()?;
    let out = prepare_out(s)?;
    let ds = Dataset::write(&out, manifest, jobs)?;
    let m = &ds.manifest;
    println!("wrote {} episodes at {}×{} to {}", m.episodes.len(), m.resolution, m.resolution, out.display());
    for split in [Split::Train, Split::HeldOut] {
        println!("  {}: {}", split.name(), m.count(split));
        for &class in m.classes.classes(split) {
            let n = m.entries(split).filter(|e| e.class == class).count();
            println!("    {class}: {n}");
        }
    }
    Ok(())
}

/// Errors unless `params` has exactly the names and shapes of a fresh
/// model for `spec`.
pub fn check_params(spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    let reference = spec.init_params(0)?;
    for (name, t, _) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("parameter `{name}` missing for the configured model")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, the configured model expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.len() {
        return Err(Error::Checkpoint("checkpoint has parameters the configured model lacks".into()));
    }
    Ok(())
}

fn open_dataset(s: &Settings) -> Result<Dataset> {
    let dir = s
        .path("data.dir")
        .ok_or_else(|| Error::Config("no dataset directory given (--data)".into()))?;
    Dataset::open(&dir)
}

/// Model parameters of a training checkpoint, optimizer state dropped.
pub fn load_model_params(path: &Path) -> Result<ParamSet> {
    TrainState::load(path).map(|st| st.params).or_else(|e| match e {
        Error::Checkpoint(_) => ParamSet::load(path),
        e => Err(e),
    })
}

pub fn train(s: &Settings) -> Result<()> {
    let spec = s.model_spec()?;
    let cfg = s.train_config()?;
    let seed = s.seed()?;
    let ds = open_dataset(s)?;
    let episodes = ds.load_split(Split::Train)?;
    let mut state = match s.path("train.resume") {
        Some(p) => TrainState::load(&p)?,
        None => TrainState::fresh(&spec, seed)?,
    };
    check_params(&spec, &state.params)?;
    let out = prepare_out(s)?;
    let path = train_to_dir(&spec, &cfg, seed, &episodes, &mut state, &out)?;
    println!("{}", path.display());
    Ok(())
}

/// Per-class rows in split order followed by an `Overall` row.
pub fn eval_table(episodes: &[TaskInstance], scores: &[f64], classes: &[crate::data::ShapeClass]) -> Result<Vec<(String, DiceResult)>> {
    let mut rows = Vec::new();
    for &c in classes {
        let per: Vec<f64> = episodes
            .iter()
            .zip(scores)
            .filter(|(e, _)| e.class == c)
            .map(|(_, &d)| d)
            .collect();
        if !per.is_empty() {
            rows.push((c.name().to_string(), DiceResult::from_scores(per)?));
        }
    }
    rows.push(("Overall".to_string(), DiceResult::from_scores(scores.to_vec())?));
    Ok(rows)
}

pub fn eval(s: &Settings) -> Result<()> {
    let split = s.eval_split()?;
    if split == Split::Train && !s.get::<bool>("eval.allow_train")? {
        return Err(Error::Config("refusing to evaluate on the train split without --allow-train".into()));
    }
    let spec = s.model_spec()?;
    let ckpt = s
        .path("eval.checkpoint")
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint)".into()))?;
    let params = load_model_params(&ckpt)?;
    check_params(&spec, &params)?;
    let ds = open_dataset(s)?;
    let (seed, jobs) = (s.seed()?, s.jobs()?);
    let mut episodes = ds.load_split(split)?;
    episodes.sort_by_key(|e| e.episode_id);
    let out = prepare_out(s)?;
    let scores = match &spec {
        ModelSpec::PatchIcl(c) => {
            let cfg = crate::cascade::CascadeConfig {
                noise_enabled: s.get("eval.noise")?,
                ..c.clone()
            };
            evaluate_patchicl(&episodes, &cfg, &params, seed, jobs)?
        }
        ModelSpec::Global(c) => evaluate_global(&episodes, c, &params, jobs)?,
    };
    let rows = eval_table(&episodes, &scores, ds.manifest.classes.classes(split))?;
    let mut csv = String::from("class,n,dice_mean,dice_std\n");
    for (name, r) in &rows {
        writeln!(csv, "{name},{},{:.6},{:.6}", r.n, r.mean, r.std).expect("write to String");
        println!("{name:>10}  {:.4} ± {:.4}  (n={})", r.mean, r.std, r.n);
    }
    write_text(&out.join(EVAL_CSV), &csv)?;
    let mut per = String::from("episode,class,dice\n");
    for (e, d) in episodes.iter().zip(&scores) {
        writeln!(per, "{},{},{:.6}", e.episode_id, e.class, d).expect("write to String");
    }
    write_text(&out.join(EVAL_EPISODES_CSV), &per)?;
    let n_dump: usize = s.get("eval.dump_patches")?;
    if n_dump > 0 {
        let dir = out.join("patches");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for ep in episodes.iter().take(n_dump) {
            dump_episode(&dir, ep, &spec, &params, seed, s.get("eval.noise")?)?;
        }
        println!("wrote {} strips to {}", n_dump.min(episodes.len()), dir.display());
    }
    Ok(())
}

fn outline(img: &mut Tensor, boxes: &[PatchBox]) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut data = img.data().to_vec();
    for b in boxes {
        let (y1, x1) = ((b.y0 + b.size).min(h) - 1, (b.x0 + b.size).min(w) - 1);
        for x in b.x0..=x1 {
            data[b.y0 * w + x] = 1.0;
            data[y1 * w + x] = 1.0;
        }
        for y in b.y0..=y1 {
            data[y * w + b.x0] = 1.0;
            data[y * w + x1] = 1.0;
        }
    }
    *img = Tensor::new(vec![h, w], data).expect("same shape");
}

/// Side-by-side `[a | b | c]` of equal-size maps.
fn strip(panels: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = panels[0].hw()?;
    let n = panels.len();
    Ok(Tensor::from_fn(&[h, w * n], |i| {
        let (y, x) = (i / (w * n), i % (w * n));
        panels[x / w].data()[y * w + x % w]
    }))
}

fn dump_episode(dir: &Path, ep: &TaskInstance, spec: &ModelSpec, params: &ParamSet, seed: u64, noise: bool) -> Result<()> {
    match spec {
        ModelSpec::PatchIcl(c) => {
            let cfg = crate::cascade::CascadeConfig {
                noise_enabled: noise,
                ..c.clone()
            };
            let pyr = forward(ep, &cfg, params, &RngStream::new(seed, ep.episode_id))?;
            for (l, lp) in pyr.levels.iter().enumerate() {
                let task = ep.resampled(lp.resolution)?;
                let mut img = task.target_image.clone();
                outline(&mut img, &lp.patches.boxes());
                let prob = lp.combined.map(kernels::sigmoid);
                let path = dir.join(format!("{:06}_level{l}.pgm", ep.episode_id));
                write_pgm(&path, &strip(&[&img, &task.target_mask, &prob])?)?;
            }
        }
        ModelSpec::Global(c) => {
            let prob = global_forward(ep, c, params)?;
            let path = dir.join(format!("{:06}_global.pgm", ep.episode_id));
            write_pgm(&path, &strip(&[&ep.target_image, &ep.target_mask, &prob])?)?;
        }
    }
    Ok(())
}

pub fn bench_flops(s: &Settings) -> Result<()> {
    let resolutions = s.bench_resolutions()?;
    let cost_only: bool = s.get("bench.cost_only")?;
    let cascade = s.cascade()?;
    let global = s.global()?;
    let data = s.data_config()?;
    let n_context = data.n_context;
    let (seed, jobs) = (s.seed()?, s.jobs()?);
    let rows = if cost_only {
        prepare_out(s)?;
        benchmark_sweep(&resolutions, &cascade, &global, n_context, None)?
    } else {
        let need = |key: &str, flag: &str| {
            s.path(key)
                .ok_or_else(|| Error::Config(format!("{flag} is required unless --cost-only is given")))
        };
        let pp = load_model_params(&need("bench.patchicl_checkpoint", "--patchicl-checkpoint")?)?;
        let gp = load_model_params(&need("bench.global_checkpoint", "--global-checkpoint")?)?;
        check_params(&ModelSpec::PatchIcl(cascade.clone()), &pp)?;
        check_params(&ModelSpec::Global(global.clone()), &gp)?;
        prepare_out(s)?;
        let n: usize = s.get("bench.episodes")?;
        let classes = s.class_split()?;
        let episodes = move |r: usize| -> Result<Vec<TaskInstance>> {
            let m = DatasetManifest::plan(seed, r, 4 * n, 0.25, classes.clone(), data.clone())?;
            m.entries(Split::HeldOut).take(n).map(|e| m.generate(e)).collect()
        };
        let eval_cascade = crate::cascade::CascadeConfig {
            noise_enabled: s.get("eval.noise")?,
            ..cascade.clone()
        };
        let models = SweepModels {
            cascade: &eval_cascade,
            cascade_params: &pp,
            global: &global,
            global_params: &gp,
            episodes: &episodes,
            seed,
            jobs,
        };
        benchmark_sweep(&resolutions, &eval_cascade, &global, n_context, Some(&models))?
    };
    let path = s.out().join(SWEEP_CSV);
    write_text(&path, &sweep_csv(&rows))?;
    for row in &rows {
        let f = &row.flops;
        let dice = row.dice.as_ref().map(|d| format!("  dice {:.4}", d.mean)).unwrap_or_default();
        println!("{:>5} {:<9} {:>12.3e} FLOPs{dice}", f.resolution, f.arch.name(), f.total());
    }
    match crossover(&rows) {
        Some(r) => println!("crossover resolution: {r}"),
        None => println!("crossover resolution: none in sweep"),
    }
    println!("{}", path.display());
    Ok(())
}
