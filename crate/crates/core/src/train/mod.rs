//! Adam training loop for the patch cascade and the dense baseline, with
//! checkpoints that carry optimizer state so a resumed run continues
//! bit-for-bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::baseline::{global_logits_graph, init_global_params, GlobalModelConfig};
use crate::cascade::{forward_graph, level_loss_graph, total_loss_graph, CascadeConfig};
use crate::data::TaskInstance;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::numerics::{kernels, mix, Graph, ParamSet, RngStream, Tensor, Var};

const OPTIM_PREFIX: &str = "optim/";
const STEP_STREAM: u64 = 0x7a1_5eed;
const INIT_STREAM: u64 = 0x1417;

/// Which network is trained.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    PatchIcl(CascadeConfig),
    Global(GlobalModelConfig),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::PatchIcl(c) => c.validate(),
            ModelSpec::Global(c) => c.validate(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = RngStream::new(seed, INIT_STREAM);
        match self {
            ModelSpec::PatchIcl(c) => {
                c.validate()?;
                init_params(&c.model, &mut rng)
            }
            ModelSpec::Global(c) => init_global_params(c, &mut rng),
        }
    }

    /// Number of per-level loss terms.
    pub fn n_levels(&self) -> usize {
        match self {
            ModelSpec::PatchIcl(c) => c.levels.len(),
            ModelSpec::Global(_) => 1,
        }
    }

    /// Total and per-level losses on a graph.
    pub fn loss_graph(&self, g: &mut Graph, params: &ParamSet, task: &TaskInstance, rng: &RngStream) -> Result<(Var, Vec<Var>)> {
        let b = g.bind(params);
        match self {
            ModelSpec::PatchIcl(c) => {
                let traces = forward_graph(g, &b, task, c, rng)?;
                total_loss_graph(g, &traces, &task.target_mask)
            }
            ModelSpec::Global(c) => {
                let task_r = task.resampled(c.resolution)?;
                let z = global_logits_graph(g, &b, c, &task_r)?;
                let l = level_loss_graph(g, z, &task_r.target_mask)?;
                Ok((l, vec![l]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write `ckpt_{step}.pckt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn step(&mut self, cfg: &TrainConfig, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut w = params.get(name)?.data().to_vec();
            for (i, &gi) in grad.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                w[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
            params.set(name, Tensor::new(grad.shape().to_vec(), w)?)?;
        }
        Ok(())
    }
}

/// Parameters, optimizer moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn fresh(model: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            params: model.init_params(seed)?,
            adam: Adam::default(),
            step: 0,
        })
    }

    /// Model parameters followed by `optim/` entries.
    pub fn to_checkpoint(&self) -> Result<ParamSet> {
        let mut out = self.params.clone();
        out.insert(&format!("{OPTIM_PREFIX}step"), Tensor::scalar(self.step as f64))?;
        out.insert(&format!("{OPTIM_PREFIX}t"), Tensor::scalar(self.adam.t as f64))?;
        for (name, m) in &self.adam.m {
            let shape = self.params.get(name)?.shape().to_vec();
            out.insert(&format!("{OPTIM_PREFIX}m/{name}"), Tensor::new(shape.clone(), m.clone())?)?;
            out.insert(&format!("{OPTIM_PREFIX}v/{name}"), Tensor::new(shape, self.adam.v[name].clone())?)?;
        }
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &ParamSet) -> Result<Self> {
        let params = ckpt.without_prefix(OPTIM_PREFIX);
        let optim = ckpt.with_prefix(OPTIM_PREFIX);
        let scalar = |name: &str| -> Result<f64> {
            optim
                .get(name)
                .and_then(Tensor::item)
                .map_err(|_| Error::Checkpoint(format!("missing `{OPTIM_PREFIX}{name}`")))
        };
        let (step, t) = (scalar("step")? as usize, scalar("t")? as u64);
        let mut adam = Adam { t, ..Adam::default() };
        let ms = optim.with_prefix("m/");
        let vs = optim.with_prefix("v/");
        for (name, m, _) in ms.iter() {
            let v = vs
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("second moment of `{name}` missing")))?;
            params.get(name).map_err(|_| Error::Checkpoint(format!("moment for unknown `{name}`")))?;
            adam.m.insert(name.to_string(), m.data().to_vec());
            adam.v.insert(name.to_string(), v.data().to_vec());
        }
        Ok(Self { params, adam, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&ParamSet::load(path)?)
    }
}

/// Losses of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub levels: Vec<f64>,
}

impl StepLog {
    pub fn csv_header(n_levels: usize) -> String {
        let mut h = String::from("step,total");
        for l in 0..n_levels {
            h.push_str(&format!(",level_{l}"));
        }
        h
    }

    /// Losses are written with round-trip precision.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{:?}", self.step, self.total);
        for l in &self.levels {
            row.push_str(&format!(",{l:?}"));
        }
        row
    }
}

/// Episode index and forward-pass stream for `step`; depends only on
/// `(seed, step)`.
pub fn step_rng(seed: u64, step: usize, n_episodes: usize) -> (usize, RngStream) {
    let mut rng = RngStream::new(seed, mix(STEP_STREAM, step as u64));
    let idx = rng.index(n_episodes);
    (idx, rng.derive(1))
}

/// One Adam step on a single episode.
pub fn train_step(
    model: &ModelSpec,
    cfg: &TrainConfig,
    state: &mut TrainState,
    task: &TaskInstance,
    rng: &RngStream,
) -> Result<StepLog> {
    let mut g = Graph::new();
    let (total, per_level) = model.loss_graph(&mut g, &state.params, task, rng).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss(state.step),
        e => e,
    })?;
    let loss = g.value(total).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(state.step));
    }
    let levels = per_level.iter().map(|&v| g.value(v).item()).collect::<Result<Vec<_>>>()?;
    let grads = g.backward(total, &state.params)?;
    if grads.values().any(|t| !t.all_finite()) {
        return Err(Error::NonFiniteLoss(state.step));
    }
    state.adam.step(cfg, &mut state.params, &grads)?;
    let log = StepLog {
        step: state.step,
        total: loss,
        levels,
    };
    state.step += 1;
    Ok(log)
}

/// Runs until `state.step == cfg.steps`, calling `on_step` after every step.
pub fn train(
    model: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    episodes: &[TaskInstance],
    state: &mut TrainState,
    mut on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<()> {
    model.validate()?;
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no training episodes".into()));
    }
    while state.step < cfg.steps {
        let (idx, rng) = step_rng(seed, state.step, episodes.len());
        let log = train_step(model, cfg, state, &episodes[idx], &rng)?;
        on_step(&log, state)?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.pckt"))
}

pub const FINAL_CHECKPOINT: &str = "final.pckt";
pub const LOG_FILE: &str = "train_log.csv";

/// [`train`] with a CSV log and checkpoints under `out`. Returns the final
/// checkpoint path.
pub fn train_to_dir(
    model: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    episodes: &[TaskInstance],
    state: &mut TrainState,
    out: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{}", StepLog::csv_header(model.n_levels())).map_err(|e| Error::io(&log_path, e))?;
    train(model, cfg, seed, episodes, state, |row, st| {
        writeln!(log, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 {
            st.save(&checkpoint_path(out, st.step))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let path = out.join(FINAL_CHECKPOINT);
    state.save(&path)?;
    Ok(path)
}

/// Soft-Dice loss of a constant 0.5 prediction, the per-level loss of an
/// untrained network apart from `ln 2`.
pub fn untrained_dice_loss(gt: &Tensor) -> f64 {
    let n = gt.len() as f64;
    let y = gt.sum();
    1.0 - (y + 1.0) / (0.5 * n + y + 1.0)
}

/// Expected step-0 loss: `Σ_ℓ (ln 2 + dice_ℓ)` over the resampled masks.
pub fn untrained_loss(model: &ModelSpec, gt: &Tensor) -> Result<f64> {
    let resolutions: Vec<usize> = match model {
        ModelSpec::PatchIcl(c) => c.levels.iter().map(|l| l.resolution).collect(),
        ModelSpec::Global(c) => vec![c.resolution],
    };
    resolutions.iter().try_fold(0.0, |acc, &r| {
        Ok(acc + std::f64::consts::LN_2 + untrained_dice_loss(&kernels::resample_mask(gt, r)?))
    })
}
