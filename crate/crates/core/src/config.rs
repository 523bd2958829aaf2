//! Run configuration: one JSON document with a section per module, sparse
//! file overlays, dotted `--set` overrides and run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Modality};
use crate::data::DataGenConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::{Direction, FusionConfig};
use crate::infer::{InferConfig, SWEEP_GRID};
use crate::train::TrainConfig;

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "AVLINK_RUN_ROOT";

/// SHA-256 of the canonical JSON encoding.
pub fn digest_of<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataGenConfig,
    pub dataset: DatasetSizes,
    pub audio: BackboneConfig,
    pub video: BackboneConfig,
    pub fusion: FusionConfig,
    pub train_base: TrainConfig,
    pub train_fusion: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub sweep_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Toy backbones on the default synthetic clips.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            data: DataGenConfig::default(),
            dataset: DatasetSizes { train: 512, eval: 64 },
            audio: BackboneConfig::toy_audio(),
            video: BackboneConfig::toy_video(),
            fusion: FusionConfig::toy(Direction::V2A),
            train_base: TrainConfig::default(),
            train_fusion: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
            sweep_grid: SWEEP_GRID.to_vec(),
        }
    }

    /// Reduced sizes that train end to end on a single core in minutes:
    /// 8x8 frames, 4-block backbones of width 32/24 and two fusion blocks.
    pub fn desk() -> Self {
        let audio = BackboneConfig { n_blocks: 4, hidden: 32, heads: 2, mlp_hidden: 64, time_freq_dim: 32, ..BackboneConfig::toy_audio() };
        let video = BackboneConfig { n_blocks: 4, hidden: 24, heads: 2, mlp_hidden: 48, time_freq_dim: 32, ..BackboneConfig::toy_video() };
        let fusion = FusionConfig { n_fusion: 2, common_dim: 32, heads: 2, mlp_hidden: 64, ..FusionConfig::toy(Direction::V2A) };
        let train = TrainConfig { lr: 1e-3, warmup_steps: 100, total_steps: 1500, batch: 8, ..TrainConfig::default() };
        Self {
            data: DataGenConfig { height: 8, width: 8, ..DataGenConfig::default() },
            dataset: DatasetSizes { train: 256, eval: 32 },
            audio,
            video,
            fusion,
            train_base: train.clone(),
            train_fusion: train,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (toy, desk)"))),
        }
    }

    pub fn backbone(&self, m: Modality) -> &BackboneConfig {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Training config of the base stage with the run seed folded in.
    pub fn base_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train_base.clone() }
    }

    pub fn fusion_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train_fusion.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.audio.validate()?;
        self.video.validate()?;
        self.fusion.validate()?;
        self.train_base.validate()?;
        self.train_fusion.validate()?;
        self.infer.guidance.validate()?;
        if self.audio.modality != Modality::Audio || self.video.modality != Modality::Video {
            return Err(Error::Config("audio/video sections have the wrong modality".into()));
        }
        if self.audio.in_channels != self.data.samples_per_token {
            return Err(Error::Config(format!(
                "audio.in_channels {} != data.samples_per_token {}",
                self.audio.in_channels, self.data.samples_per_token
            )));
        }
        let p = self.video.patch;
        if self.data.height % p != 0 || self.data.width % p != 0 {
            return Err(Error::Config(format!("video.patch {p} does not tile {}x{} frames", self.data.height, self.data.width)));
        }
        if self.video.in_channels != p * p * self.data.channels {
            return Err(Error::Config(format!("video.in_channels must be {} for patch {p}", p * p * self.data.channels)));
        }
        if self.audio.n_blocks != self.video.n_blocks {
            return Err(Error::Config("audio and video backbones need equal depth".into()));
        }
        if self.dataset.train == 0 || self.dataset.eval == 0 {
            return Err(Error::Config("dataset sizes must be >= 1".into()));
        }
        if self.sweep_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("sweep_grid values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Overlays a sparse JSON document; every key must already exist.
    pub fn merge(&mut self, overlay: &Value) -> Result<()> {
        let mut base = serde_json::to_value(&*self)?;
        merge_value(&mut base, overlay, "")?;
        *self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a
    /// plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut overlay = value;
        for part in path.trim().split('.').rev() {
            overlay = Value::Object([(part.to_string(), overlay)].into_iter().collect());
        }
        self.merge(&overlay)
    }

    /// Loads `path` (or the preset when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, preset: &str, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self::preset(preset)?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            // a dump from a previous run wraps the config next to its digest
            let v = match (v.get("config"), v.get("digest")) {
                (Some(c), Some(_)) => c.clone(),
                _ => v,
            };
            cfg.merge(&v)?;
        }
        for s in sets {
            cfg.set(s)?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides (e.g. from command-line arguments).
    pub fn with_overrides<I: IntoIterator<Item = String>>(mut self, sets: I) -> Result<Self> {
        for s in sets {
            self.set(&s)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({ "digest": self.digest(), "config": self });
        write_json(path, &doc)
    }

    /// Reads a config written by [`RunConfig::dump`] or a bare config.
    pub fn read_dump(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)?;
        let cfg = v.get("config").cloned().unwrap_or(v);
        Ok(serde_json::from_value(cfg)?)
    }
}

fn merge_value(base: &mut Value, overlay: &Value, prefix: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge_value(slot, v, &path)?,
                    None => {
                        let mut keys: Vec<(f64, String)> = b
                            .keys()
                            .map(|c| (strsim::jaro_winkler(k, c), if prefix.is_empty() { c.clone() } else { format!("{prefix}.{c}") }))
                            .collect();
                        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                        return Err(Error::UnknownKey { key: path, suggestions: keys.into_iter().take(3).map(|k| k.1).collect() });
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Run root from `explicit`, else `$AVLINK_RUN_ROOT`, else `./runs`.
pub fn run_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<timestamp>-<command>-<digest8>` and dumps the config
/// into it. A numeric suffix keeps directories of the same second apart.
pub fn create_run_dir(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let digest = cfg.digest();
    let base = format!("{stamp}-{command}-{}", &digest[..8]);
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{base}.{k}"));
        k += 1;
    }
    std::fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.dump(&dir.join("config.json"))?;
    Ok(dir)
}
