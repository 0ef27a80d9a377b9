use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;

use super::{generate_episode, ClassSplit, ContextPair, DataConfig, ShapeClass, Split, TaskInstance};
use crate::error::{Error, Result};
use crate::kv;
use crate::numerics::{mix, RngStream, Tensor};

const FORMAT: &str = "patchicl-dataset-1";
const EPISODE_STREAM: u64 = 0x5eed_e915;

/// Writes a grayscale map with values in `[0, 1]` as binary PGM (P5,
/// maxval 255).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.hw()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5, maxval 255) into a map with values `byte / 255`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: magic, width, height, maxval, separated by whitespace or comments
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary (P5) PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(bad(&format!("expected {} raster bytes, found {}", w * h, raster.len())));
    }
    Tensor::new(vec![h, w], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// One planned episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeEntry {
    pub id: u64,
    pub split: Split,
    pub class: ShapeClass,
    pub case_id: u64,
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub resolution: usize,
    pub classes: ClassSplit,
    pub data: DataConfig,
    pub episodes: Vec<EpisodeEntry>,
}

impl DatasetManifest {
    /// Plans `total` episodes, a `held_out_fraction` share of them on
    /// held-out classes. Classes cycle round-robin within each split.
    pub fn plan(
        seed: u64,
        resolution: usize,
        total: usize,
        held_out_fraction: f64,
        classes: ClassSplit,
        data: DataConfig,
    ) -> Result<Self> {
        classes.validate()?;
        data.validate()?;
        if total == 0 {
            return Err(Error::Config("episode count must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&held_out_fraction) || held_out_fraction == 0.0 {
            return Err(Error::Config(format!("held-out fraction {held_out_fraction} must be in (0, 1)")));
        }
        if resolution < 16 {
            return Err(Error::Config(format!("resolution {resolution} is below 16")));
        }
        let n_held = ((total as f64 * held_out_fraction).round() as usize).clamp(1, total);
        let n_train = total - n_held;
        let mut episodes = Vec::with_capacity(total);
        for (split, n) in [(Split::Train, n_train), (Split::HeldOut, n_held)] {
            let list = classes.classes(split);
            for j in 0..n {
                let id = episodes.len() as u64;
                episodes.push(EpisodeEntry {
                    id,
                    split,
                    class: list[j % list.len()],
                    case_id: id,
                });
            }
        }
        Ok(Self {
            seed,
            resolution,
            classes,
            data,
            episodes,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &EpisodeEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    /// Renders one episode from its own `(seed, case)` stream.
    pub fn generate(&self, entry: &EpisodeEntry) -> Result<TaskInstance> {
        let mut rng = RngStream::new(self.seed, mix(EPISODE_STREAM, entry.case_id));
        let pool = self.classes.distractor_pool(entry.split);
        let mut ep = generate_episode(entry.class, entry.case_id, self.resolution, &pool, &self.data, &mut rng)?;
        ep.episode_id = entry.id;
        Ok(ep)
    }

    pub fn to_text(&self) -> String {
        let list = |cs: &[ShapeClass]| cs.iter().map(|c| c.name()).collect::<Vec<_>>().join(",");
        let mut m: IndexMap<String, String> = IndexMap::new();
        m.insert("format".into(), FORMAT.into());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("resolution".into(), self.resolution.to_string());
        m.insert("noise_sigma".into(), self.data.noise_sigma.to_string());
        m.insert("n_context".into(), self.data.n_context.to_string());
        m.insert("max_distractors".into(), self.data.max_distractors.to_string());
        m.insert("train_classes".into(), list(&self.classes.train));
        m.insert("held_out_classes".into(), list(&self.classes.held_out));
        m.insert("episodes_train".into(), self.count(Split::Train).to_string());
        m.insert("episodes_held_out".into(), self.count(Split::HeldOut).to_string());
        for e in &self.episodes {
            m.insert(
                format!("episode.{:06}", e.id),
                format!("{} {} {}", e.split.name(), e.class, e.case_id),
            );
        }
        kv::render(&m)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let m = kv::parse(text, origin)?;
        let format: String = kv::get(&m, "format")?;
        if format != FORMAT {
            return Err(Error::Config(format!("unsupported dataset format `{format}`")));
        }
        let list = |key: &str| -> Result<Vec<ShapeClass>> {
            let raw: String = kv::get(&m, key)?;
            raw.split(',').map(|s| s.trim().parse()).collect()
        };
        let classes = ClassSplit::new(list("train_classes")?, list("held_out_classes")?)?;
        let data = DataConfig {
            noise_sigma: kv::get(&m, "noise_sigma")?,
            n_context: kv::get(&m, "n_context")?,
            max_distractors: kv::get(&m, "max_distractors")?,
        };
        let mut episodes = Vec::new();
        for (k, v) in m.iter().filter(|(k, _)| k.starts_with("episode.")) {
            let bad = || Error::Config(format!("malformed manifest entry `{k} = {v}`"));
            let id: u64 = k["episode.".len()..].parse().map_err(|_| bad())?;
            let parts: Vec<&str> = v.split_whitespace().collect();
            let [split, class, case] = parts.as_slice() else {
                return Err(bad());
            };
            episodes.push(EpisodeEntry {
                id,
                split: split.parse()?,
                class: class.parse()?,
                case_id: case.parse().map_err(|_| bad())?,
            });
        }
        let manifest = Self {
            seed: kv::get(&m, "seed")?,
            resolution: kv::get(&m, "resolution")?,
            classes,
            data,
            episodes,
        };
        for (split, key) in [(Split::Train, "episodes_train"), (Split::HeldOut, "episodes_held_out")] {
            let declared: usize = kv::get(&m, key)?;
            if declared != manifest.count(split) {
                return Err(Error::Config(format!(
                    "`{key}` says {declared} but {} entries are listed",
                    manifest.count(split)
                )));
            }
        }
        for e in &manifest.episodes {
            if !manifest.classes.classes(e.split).contains(&e.class) {
                return Err(Error::Config(format!(
                    "episode {} has class {} outside its {} split",
                    e.id,
                    e.class,
                    e.split.name()
                )));
            }
        }
        Ok(manifest)
    }
}

/// A dataset directory: `manifest.txt` plus one folder per split holding
/// one folder per episode.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub const MANIFEST: &'static str = "manifest.txt";

    pub fn episode_dir(dir: &Path, e: &EpisodeEntry) -> PathBuf {
        dir.join(e.split.name()).join(format!("{:06}", e.id))
    }

    /// Generates every episode (in parallel on `jobs` threads) and writes
    /// images, masks and the manifest.
    pub fn write(dir: &Path, manifest: DatasetManifest, jobs: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| {
            manifest.episodes.par_iter().try_for_each(|entry| -> Result<()> {
                let ep = manifest.generate(entry)?;
                let edir = Self::episode_dir(dir, entry);
                fs::create_dir_all(&edir).map_err(|e| Error::io(&edir, e))?;
                write_pgm(&edir.join("target.pgm"), &ep.target_image)?;
                write_pgm(&edir.join("target_mask.pgm"), &ep.target_mask)?;
                for (i, c) in ep.context.iter().enumerate() {
                    write_pgm(&edir.join(format!("context_{i}.pgm")), &c.image)?;
                    write_pgm(&edir.join(format!("context_{i}_mask.pgm")), &c.mask)?;
                }
                Ok(())
            })
        })?;
        let path = dir.join(Self::MANIFEST);
        fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::MANIFEST);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest::from_text(&text, &path)?,
        })
    }

    pub fn load(&self, entry: &EpisodeEntry) -> Result<TaskInstance> {
        let edir = Self::episode_dir(&self.dir, entry);
        let mask = |name: &str| -> Result<Tensor> {
            let t = read_pgm(&edir.join(name))?;
            Ok(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
        };
        let context = (0..self.manifest.data.n_context)
            .map(|i| {
                Ok(ContextPair {
                    image: read_pgm(&edir.join(format!("context_{i}.pgm")))?,
                    mask: mask(&format!("context_{i}_mask.pgm"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TaskInstance {
            target_image: read_pgm(&edir.join("target.pgm"))?,
            target_mask: mask("target_mask.pgm")?,
            context,
            class: entry.class,
            case_id: entry.case_id,
            episode_id: entry.id,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<TaskInstance>> {
        self.manifest.entries(split).map(|e| self.load(e)).collect()
    }
}
