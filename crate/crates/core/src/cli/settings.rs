//! Resolved run settings: built-in defaults, then a config file, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::baseline::GlobalModelConfig;
use crate::cascade::{CascadeConfig, LevelConfig};
use crate::data::{ClassSplit, DataConfig, ShapeClass, Split};
use crate::error::{Error, Result};
use crate::evalcost::Arch;
use crate::kv;
use crate::model::ModelConfig;
use crate::train::{ModelSpec, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("jobs", "1"),
    ("out", "out"),
    ("arch", "patchicl"),
    ("data.dir", "data"),
    ("data.resolution", "64"),
    ("data.episodes", "512"),
    ("data.held_out_fraction", "0.25"),
    ("data.train_classes", "disk,rectangle,triangle,cross"),
    ("data.held_out_classes", "ring,ellipse"),
    ("data.noise_sigma", "0.05"),
    ("data.n_context", "3"),
    ("data.max_distractors", "3"),
    ("cascade.resolutions", "16,32,64"),
    ("cascade.k_target", "4,8,16"),
    ("cascade.k_context", "2,3,4"),
    ("cascade.patch_size", "8"),
    ("cascade.stride", "8"),
    ("cascade.noise", "true"),
    ("model.d", "32"),
    ("model.layers", "2"),
    ("model.heads", "2"),
    ("model.enc_channels", "8,16"),
    ("global.d", "16"),
    ("global.layers", "1"),
    ("global.heads", "1"),
    ("global.enc_channels", "8,16"),
    ("global.resolution", "32"),
    ("global.cap", "128"),
    ("train.steps", "5000"),
    ("train.lr", "0.001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.checkpoint_every", "1000"),
    ("train.resume", ""),
    ("eval.checkpoint", ""),
    ("eval.split", "held_out"),
    ("eval.allow_train", "false"),
    ("eval.noise", "false"),
    ("eval.dump_patches", "0"),
    ("bench.resolutions", "64,128,256,512"),
    ("bench.cost_only", "false"),
    ("bench.episodes", "16"),
    ("bench.patchicl_checkpoint", ""),
    ("bench.global_checkpoint", ""),
];

/// Every setting as text, in a fixed key order.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    map: IndexMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            map: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn pair(key: &str, raw: &str) -> Result<[usize; 2]> {
    let v: Vec<usize> = list(key, raw)?;
    <[usize; 2]>::try_from(v).map_err(|_| Error::Config(format!("`{key}` needs two values, got `{raw}`")))
}

impl Settings {
    /// Defaults overlaid with `config` (if any) and then `overrides`.
    pub fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Self::default();
        if let Some(path) = config {
            for (k, v) in kv::read(path)? {
                s.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.map.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown setting `{key}`"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        kv::get(&self.map, key)
    }

    /// A path setting, `None` when empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// The `run.lock` text.
    pub fn render(&self) -> String {
        kv::render(&self.map)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn jobs(&self) -> Result<usize> {
        let j: usize = self.get("jobs")?;
        if j == 0 {
            return Err(Error::Config("jobs must be ≥ 1".into()));
        }
        Ok(j)
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn arch(&self) -> Result<Arch> {
        match self.raw("arch") {
            "patchicl" => Ok(Arch::PatchIcl),
            "global" => Ok(Arch::Global),
            other => Err(Error::Config(format!("unknown arch `{other}` (expected patchicl or global)"))),
        }
    }

    pub fn class_split(&self) -> Result<ClassSplit> {
        ClassSplit::new(
            list::<ShapeClass>("data.train_classes", self.raw("data.train_classes"))?,
            list::<ShapeClass>("data.held_out_classes", self.raw("data.held_out_classes"))?,
        )
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        let c = DataConfig {
            noise_sigma: self.get("data.noise_sigma")?,
            n_context: self.get("data.n_context")?,
            max_distractors: self.get("data.max_distractors")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d: self.get("model.d")?,
            layers: self.get("model.layers")?,
            heads: self.get("model.heads")?,
            patch_size: self.get("cascade.patch_size")?,
            enc_channels: pair("model.enc_channels", self.raw("model.enc_channels"))?,
        })
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        let res: Vec<usize> = list("cascade.resolutions", self.raw("cascade.resolutions"))?;
        let kt: Vec<usize> = list("cascade.k_target", self.raw("cascade.k_target"))?;
        let kc: Vec<usize> = list("cascade.k_context", self.raw("cascade.k_context"))?;
        if kt.len() != res.len() || kc.len() != res.len() {
            return Err(Error::Config(format!(
                "cascade lists differ in length: {} resolutions, {} k_target, {} k_context",
                res.len(),
                kt.len(),
                kc.len()
            )));
        }
        let (patch_size, stride) = (self.get("cascade.patch_size")?, self.get("cascade.stride")?);
        let cfg = CascadeConfig {
            levels: res
                .iter()
                .zip(&kt)
                .zip(&kc)
                .map(|((&resolution, &k_target), &k_context)| LevelConfig {
                    resolution,
                    k_target,
                    k_context,
                    patch_size,
                    stride,
                })
                .collect(),
            model: self.model_config()?,
            noise_enabled: self.get("cascade.noise")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn global(&self) -> Result<GlobalModelConfig> {
        let cfg = GlobalModelConfig {
            d: self.get("global.d")?,
            layers: self.get("global.layers")?,
            heads: self.get("global.heads")?,
            enc_channels: pair("global.enc_channels", self.raw("global.enc_channels"))?,
            resolution: self.get("global.resolution")?,
            cap: self.get("global.cap")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(match self.arch()? {
            Arch::PatchIcl => ModelSpec::PatchIcl(self.cascade()?),
            Arch::Global => ModelSpec::Global(self.global()?),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            steps: self.get("train.steps")?,
            lr: self.get("train.lr")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            eps: self.get("train.eps")?,
            checkpoint_every: self.get("train.checkpoint_every")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn eval_split(&self) -> Result<Split> {
        self.raw("eval.split").parse()
    }

    pub fn bench_resolutions(&self) -> Result<Vec<usize>> {
        list("bench.resolutions", self.raw("bench.resolutions"))
    }
}
