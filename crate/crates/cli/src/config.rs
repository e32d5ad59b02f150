//! Run configuration: one flat set of knobs, readable from `key=value` text
//! and overridable from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hextraj_core::hexgrid::GridSpec;
use hextraj_core::hiermap::SplitParams;
use hextraj_core::model::{ModelConfig, TrainConfig};
use hextraj_core::tensor::AdamWConfig;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// `(key, help)` for every configuration key, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("raw_path", "input CSV with entity_id,timestamp,lat,lon"),
    ("work_dir", "directory for all artifacts"),
    ("res", "tessellation resolution"),
    ("map_path", "mixed-resolution map file (overrides res)"),
    ("anchor_lat", "projection anchor latitude (default: data mean)"),
    ("anchor_lon", "projection anchor longitude (default: data mean)"),
    ("min_traj_len", "minimum cells per trajectory"),
    ("strict", "refuse cells outside the training vocabulary"),
    ("l", "input length"),
    ("k", "prediction horizon"),
    ("embed_dim", "model width"),
    ("layers", "transformer blocks"),
    ("heads", "attention heads"),
    ("dropout", "dropout probability"),
    ("batch_size", "training batch size"),
    ("lr_start", "initial learning rate"),
    ("lr_end", "final learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("epochs", "training epochs"),
    ("seed", "seed for every random choice"),
    ("beam_width", "beam width"),
    ("sweep_l", "comma-separated input lengths for the evaluation sweep"),
    ("sweep_k", "comma-separated horizons for the evaluation sweep"),
    ("delta", "map visit-count threshold (default: median)"),
    ("phi", "map spatial-variability threshold (default: median)"),
    ("theta", "map skewness threshold"),
    ("r_min", "coarsest map resolution"),
    ("r_max", "finest map resolution"),
    ("max_iter", "map refinement iterations"),
    ("count_trajectories", "map counts trajectories instead of points"),
];

const DATA_KEYS: &[&str] = &["raw_path", "res", "map_path", "anchor_lat", "anchor_lon", "min_traj_len", "strict"];
const MODEL_KEYS: &[&str] = &[
    "l",
    "k",
    "embed_dim",
    "layers",
    "heads",
    "dropout",
    "batch_size",
    "lr_start",
    "lr_end",
    "weight_decay",
    "epochs",
    "seed",
];
const MAP_KEYS: &[&str] = &[
    "raw_path",
    "anchor_lat",
    "anchor_lon",
    "delta",
    "phi",
    "theta",
    "r_min",
    "r_max",
    "max_iter",
    "count_trajectories",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub raw_path: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub res: u8,
    pub map_path: Option<PathBuf>,
    pub anchor_lat: Option<f64>,
    pub anchor_lon: Option<f64>,
    pub min_traj_len: usize,
    pub strict: bool,
    pub l: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beam_width: usize,
    pub sweep_l: Vec<usize>,
    pub sweep_k: Vec<usize>,
    pub delta: Option<f64>,
    pub phi: Option<f64>,
    pub theta: f64,
    pub r_min: u8,
    pub r_max: u8,
    pub max_iter: usize,
    pub count_trajectories: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        RunConfig {
            raw_path: None,
            work_dir: PathBuf::from("run"),
            res: 9,
            map_path: None,
            anchor_lat: None,
            anchor_lon: None,
            min_traj_len: hextraj_core::corpus::DEFAULT_MIN_LEN,
            strict: false,
            l: 10,
            k: 5,
            embed_dim: 256,
            layers: 8,
            heads: 8,
            dropout: 0.1,
            batch_size: 64,
            lr_start: opt.lr_start,
            lr_end: opt.lr_end,
            weight_decay: opt.weight_decay,
            epochs: 10,
            seed: 0,
            beam_width: 5,
            sweep_l: Vec::new(),
            sweep_k: Vec::new(),
            delta: None,
            phi: None,
            theta: 1.0,
            r_min: 7,
            r_max: 9,
            max_iter: 10,
            count_trajectories: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let some_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let some_f64 = |k: &str, v: &str| -> Result<Option<f64>, CliError> {
            if v.is_empty() {
                Ok(None)
            } else {
                parse(k, v).map(Some)
            }
        };
        match key {
            "raw_path" => self.raw_path = some_path(v),
            "work_dir" => self.work_dir = PathBuf::from(v),
            "res" => self.res = parse(key, v)?,
            "map_path" => self.map_path = some_path(v),
            "anchor_lat" => self.anchor_lat = some_f64(key, v)?,
            "anchor_lon" => self.anchor_lon = some_f64(key, v)?,
            "min_traj_len" => self.min_traj_len = parse(key, v)?,
            "strict" => self.strict = parse(key, v)?,
            "l" => self.l = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_start" => self.lr_start = parse(key, v)?,
            "lr_end" => self.lr_end = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "beam_width" => self.beam_width = parse(key, v)?,
            "sweep_l" => self.sweep_l = parse_list(key, v)?,
            "sweep_k" => self.sweep_k = parse_list(key, v)?,
            "delta" => self.delta = some_f64(key, v)?,
            "phi" => self.phi = some_f64(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "r_min" => self.r_min = parse(key, v)?,
            "r_max" => self.r_max = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "count_trajectories" => self.count_trajectories = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        match key {
            "raw_path" => path(&self.raw_path),
            "work_dir" => self.work_dir.display().to_string(),
            "res" => self.res.to_string(),
            "map_path" => path(&self.map_path),
            "anchor_lat" => opt(&self.anchor_lat),
            "anchor_lon" => opt(&self.anchor_lon),
            "min_traj_len" => self.min_traj_len.to_string(),
            "strict" => self.strict.to_string(),
            "l" => self.l.to_string(),
            "k" => self.k.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "dropout" => self.dropout.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_start" => self.lr_start.to_string(),
            "lr_end" => self.lr_end.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "beam_width" => self.beam_width.to_string(),
            "sweep_l" => join(&self.sweep_l),
            "sweep_k" => join(&self.sweep_k),
            "delta" => opt(&self.delta),
            "phi" => opt(&self.phi),
            "theta" => self.theta.to_string(),
            "r_min" => self.r_min.to_string(),
            "r_max" => self.r_max.to_string(),
            "max_iter" => self.max_iter.to_string(),
            "count_trajectories" => self.count_trajectories.to_string(),
            _ => String::new(),
        }
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k));
        }
        s
    }

    fn hash_keys(&self, keys: &[&str], salt: &str) -> String {
        let mut h = Sha256::new();
        h.update(salt.as_bytes());
        for k in keys {
            h.update(format!("\n{k}={}", self.get(k)).as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    /// Identifies everything that determines the processed dataset.
    pub fn data_hash(&self) -> String {
        self.hash_keys(DATA_KEYS, "data")
    }

    /// Identifies everything that determines a trained checkpoint.
    pub fn model_hash(&self) -> String {
        self.hash_keys(MODEL_KEYS, &self.data_hash())
    }

    /// Identifies a model evaluated at this beam width.
    pub fn eval_hash(&self) -> String {
        self.hash_keys(&["beam_width", "sweep_l", "sweep_k"], &self.model_hash())
    }

    pub fn map_hash(&self) -> String {
        self.hash_keys(MAP_KEYS, "map")
    }

    pub fn raw_path(&self) -> Result<&Path, CliError> {
        self.raw_path
            .as_deref()
            .ok_or_else(|| CliError::Usage("raw_path is not set".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.l == 0 || self.k == 0 {
            return bad("l and k must be positive".into());
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.anchor_lat.is_some() != self.anchor_lon.is_some() {
            return bad("set both anchor_lat and anchor_lon, or neither".into());
        }
        self.model_config(3).validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len: self.l + self.k,
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr_start: self.lr_start,
                lr_end: self.lr_end,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    /// Explicit anchor, if both coordinates are set.
    pub fn anchor(&self) -> Option<GridSpec> {
        Some(GridSpec::new(self.anchor_lat?, self.anchor_lon?))
    }

    pub fn split_params(&self) -> SplitParams {
        SplitParams {
            delta: self.delta.unwrap_or(0.0),
            phi: self.phi.unwrap_or(0.0),
            theta: self.theta,
            r_min: self.r_min,
            r_max: self.r_max,
            max_iter: self.max_iter,
            count_trajectories: self.count_trajectories,
        }
    }
}
