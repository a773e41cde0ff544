//! `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use xlm_core::model::{ModelConfig, Sublayer1};
use xlm_core::training::TrainConfig;

pub const KEYS: [&str; 17] = [
    "vocab_size",
    "context_len",
    "dim",
    "ffn_hidden",
    "layers",
    "sublayer1",
    "pad_token",
    "batch_size",
    "n_batches",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "init_std",
    "seed",
    "corpus",
    "out_dir",
];

pub const TABLE1: &str = include_str!("../presets/table1.cfg");
pub const TABLE2: &str = include_str!("../presets/table2.cfg");

pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "table1" => Some(TABLE1),
        "table2" => Some(TABLE2),
        _ => None,
    }
}

/// Where training tokens come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    /// `binary:N`, the counting corpus generated in memory.
    Binary(u32),
    File(PathBuf),
}

impl FromStr for CorpusSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("binary:") {
            Some(bits) => bits
                .parse()
                .map(CorpusSource::Binary)
                .map_err(|_| format!("bad bit count in {s:?}")),
            None if s.is_empty() => Err("empty corpus path".into()),
            None => Ok(CorpusSource::File(PathBuf::from(s))),
        }
    }
}

/// Raw key/value pairs after merging the file and the overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_pair(line)
                .ok_or_else(|| format!("{origin}:{}: expected key = value, got {line:?}", n + 1))?;
            check_key(key).map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
            if cfg.values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(format!("{origin}:{}: duplicate key {key}", n + 1));
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (key, value) =
                split_pair(o).ok_or_else(|| format!("override {o:?} is not key=value"))?;
            check_key(key)?;
            self.values.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| format!("invalid value {v:?} for {key}"))
            })
            .transpose()
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, String> {
        self.parsed(key)?
            .ok_or_else(|| format!("missing required key {key}"))
    }

    pub fn model(&self) -> Result<ModelConfig, String> {
        let pad_token = match self.get("pad_token") {
            None | Some("none") => None,
            Some(_) => self.parsed("pad_token")?,
        };
        let sublayer1: Sublayer1 = match self.get("sublayer1") {
            Some(s) => s.parse().map_err(|e: xlm_core::Error| e.to_string())?,
            None => return Err("missing required key sublayer1".into()),
        };
        let cfg = ModelConfig {
            vocab_size: self.required("vocab_size")?,
            context_len: self.required("context_len")?,
            dim: self.required("dim")?,
            ffn_hidden: self.required("ffn_hidden")?,
            layers: self.required("layers")?,
            sublayer1,
            pad_token,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, String> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: self.parsed("batch_size")?.unwrap_or(d.batch_size),
            n_batches: self.required("n_batches")?,
            lr: self.parsed("lr")?.unwrap_or(d.lr),
            beta1: self.parsed("beta1")?.unwrap_or(d.beta1),
            beta2: self.parsed("beta2")?.unwrap_or(d.beta2),
            weight_decay: self.parsed("weight_decay")?.unwrap_or(d.weight_decay),
            init_std: self.parsed("init_std")?.unwrap_or(d.init_std),
            seed: self.parsed("seed")?.unwrap_or(d.seed),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn corpus(&self) -> Result<CorpusSource, String> {
        self.get("corpus")
            .ok_or_else(|| "missing required key corpus".to_string())?
            .parse()
    }

    pub fn out_dir(&self) -> Result<PathBuf, String> {
        self.get("out_dir")
            .map(PathBuf::from)
            .ok_or_else(|| "missing required key out_dir".into())
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

fn check_key(key: &str) -> Result<(), String> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(format!("unknown key {key:?}"))
    }
}

/// Fully resolved settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSource,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, String> {
        Ok(Self {
            model: raw.model()?,
            train: raw.train()?,
            corpus: raw.corpus()?,
            out_dir: raw.out_dir()?,
        })
    }

    /// Canonical `key = value` listing of every setting.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let corpus = match &self.corpus {
            CorpusSource::Binary(bits) => format!("binary:{bits}"),
            CorpusSource::File(p) => p.display().to_string(),
        };
        let pad = m.pad_token.map_or("none".to_string(), |p| p.to_string());
        let mut out = String::new();
        for (k, v) in [
            ("vocab_size", m.vocab_size.to_string()),
            ("context_len", m.context_len.to_string()),
            ("dim", m.dim.to_string()),
            ("ffn_hidden", m.ffn_hidden.to_string()),
            ("layers", m.layers.to_string()),
            ("sublayer1", m.sublayer1.to_string()),
            ("pad_token", pad),
            ("batch_size", t.batch_size.to_string()),
            ("n_batches", t.n_batches.to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("init_std", t.init_std.to_string()),
            ("seed", t.seed.to_string()),
            ("corpus", corpus),
            ("out_dir", self.out_dir.display().to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Reads the base configuration from a file or a named preset.
pub fn load_base(config: Option<&Path>, preset_name: Option<&str>) -> Result<RawConfig, String> {
    match (config, preset_name) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            RawConfig::parse(&text, &path.display().to_string())
        }
        (None, Some(name)) => {
            let text = preset(name).ok_or_else(|| {
                format!("unknown preset {name:?}, expected table1 or table2")
            })?;
            RawConfig::parse(text, name)
        }
        (None, None) => Ok(RawConfig::default()),
        (Some(_), Some(_)) => Err("--config and --preset are mutually exclusive".into()),
    }
}
