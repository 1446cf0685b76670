//! Plain `key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` pairs; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key=value: {line:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Format(format!("config line {}: empty key", i + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Flow2d,
    Accomp,
    Melody,
    Style,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow2d" => Ok(Self::Flow2d),
            "accomp" | "accomp-toy" => Ok(Self::Accomp),
            "melody" | "melody-grammar" => Ok(Self::Melody),
            "style" | "style-toy" => Ok(Self::Style),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flow2d => "flow2d",
            Self::Accomp => "accomp",
            Self::Melody => "melody",
            Self::Style => "style",
        })
    }
}

const RUN_KEYS: &[&str] = &[
    "model", "seed", "steps", "lr", "batch", "gamma", "out", "trace", "checkpoint", "warmup", "train", "test",
    "infer_steps", "experts", "width", "frames",
];

/// Settings shared by the training and sampling commands. Missing values
/// fall back to per-model defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub gamma: Option<f64>,
    pub warmup: usize,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub infer_steps: Option<usize>,
    pub experts: Option<usize>,
    pub width: Option<usize>,
    pub frames: Option<usize>,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            seed: 0,
            steps: None,
            lr: None,
            batch: None,
            gamma: None,
            warmup: 0,
            train_size: None,
            test_size: None,
            infer_steps: None,
            experts: None,
            width: None,
            frames: None,
            out: PathBuf::from("out"),
            trace: None,
            checkpoint: None,
        }
    }

    /// Reads a run configuration; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !RUN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let model = kv
            .get::<ModelKind>("model")?
            .ok_or_else(|| Error::Config("model is required".into()))?;
        let mut c = Self::new(model);
        if let Some(s) = kv.get("seed")? {
            c.seed = s;
        }
        c.steps = kv.get("steps")?;
        c.lr = kv.get("lr")?;
        c.batch = kv.get("batch")?;
        c.gamma = kv.get("gamma")?;
        c.warmup = kv.get("warmup")?.unwrap_or(0);
        c.train_size = kv.get("train")?;
        c.test_size = kv.get("test")?;
        c.infer_steps = kv.get("infer_steps")?;
        c.experts = kv.get("experts")?;
        c.width = kv.get("width")?;
        c.frames = kv.get("frames")?;
        if let Some(o) = kv.get_str("out") {
            c.out = PathBuf::from(o);
        }
        c.trace = kv.get_str("trace").map(PathBuf::from);
        c.checkpoint = kv.get_str("checkpoint").map(PathBuf::from);
        Ok(c)
    }

    /// The settings as `key=value` lines, readable by [`RunConfig::from_kv`].
    /// Paths are left out.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("model={}", self.model), format!("seed={}", self.seed)];
        let opt = [
            ("steps", self.steps.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("train", self.train_size.map(|v| v.to_string())),
            ("test", self.test_size.map(|v| v.to_string())),
            ("infer_steps", self.infer_steps.map(|v| v.to_string())),
            ("experts", self.experts.map(|v| v.to_string())),
            ("width", self.width.map(|v| v.to_string())),
            ("frames", self.frames.map(|v| v.to_string())),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                lines.push(format!("{k}={v}"));
            }
        }
        if self.warmup > 0 {
            lines.push(format!("warmup={}", self.warmup));
        }
        lines.join("\n") + "\n"
    }

    /// Checkpoint path: the explicit one or `<out>/model.vbnd`.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.vbnd"))
    }
}

/// Dataset request for `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub task: ModelKind,
    pub size: usize,
    pub tags: usize,
}

impl SynthConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let task = kv
            .get::<ModelKind>("model")?
            .ok_or_else(|| Error::Config("model (dataset task) is required".into()))?;
        Ok(Self {
            seed: kv.get("seed")?.unwrap_or(0),
            task,
            size: kv.get("train")?.unwrap_or(match task {
                ModelKind::Flow2d => 10_000,
                _ => 256,
            }),
            tags: 4,
        })
    }
}
