//! Run configuration: a flat `key = value` text file with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected so typos do not go unnoticed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DataSpec;
use crate::error::{AmssError, Result};
use crate::mask::{MaskMode, MaskScope};
use crate::model::{Fusion, ModelSpec};
use crate::significance::{DEFAULT_LAMBDA, DEFAULT_TAU};

/// Environment variable naming the directory relative output paths resolve
/// against.
pub const OUTPUT_ROOT_ENV: &str = "AMSS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Baseline,
    /// Per-modality gradient scale `v_k ∈ (0, 1]`.
    GlobalWise(Vec<f64>),
    /// Per-modality fixed ratio of uniformly drawn units.
    UniformMask(Vec<f64>),
    Amss,
    AmssPlus,
    TheoreticalUnbiased,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::GlobalWise(_) => "global_wise",
            Self::UniformMask(_) => "uniform_mask",
            Self::Amss => "amss",
            Self::AmssPlus => "amss_plus",
            Self::TheoreticalUnbiased => "theoretical_unbiased",
        }
    }

    /// Mask mode for the significance-driven strategies.
    pub fn adaptive_mode(&self) -> Option<MaskMode> {
        match self {
            Self::Amss => Some(MaskMode::Amss),
            Self::AmssPlus => Some(MaskMode::AmssPlus),
            Self::TheoreticalUnbiased => Some(MaskMode::TheoreticalUnbiased),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generate(DataSpec),
    File(PathBuf),
}

/// Encoder widths shared by every modality, with optional per-modality
/// overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub overrides: Vec<(usize, Vec<usize>)>,
    pub fusion: Fusion,
}

impl ModelConfig {
    pub fn to_spec(&self, input_dims: &[usize], classes: usize) -> Result<ModelSpec> {
        let mut encoder_widths = vec![self.widths.clone(); input_dims.len()];
        for (k, w) in &self.overrides {
            let slot = encoder_widths.get_mut(*k).ok_or_else(|| {
                AmssError::Config(format!("model.widths.{k} names a modality that does not exist"))
            })?;
            *slot = w.clone();
        }
        let spec = ModelSpec {
            input_dims: input_dims.to_vec(),
            encoder_widths,
            fusion: self.fusion,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub scope: MaskScope,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without improvement before the learning rate drops tenfold;
    /// `None` keeps it constant.
    pub plateau_patience: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Recompute Fisher importance every this many iterations.
    pub fisher_stride: usize,
    pub seed: u64,
    pub init_seed: Option<u64>,
    pub sampling_seed: Option<u64>,
    pub output_dir: PathBuf,
    pub fisher_dump: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Generate(DataSpec {
                modalities: 2,
                classes: 4,
                dims: vec![16, 16],
                snr: vec![8.0, 1.0],
                train: 2000,
                val: 500,
                test: 1000,
                seed: 0,
            }),
            model: ModelConfig {
                widths: vec![32, 16],
                overrides: Vec::new(),
                fusion: Fusion::Concat,
            },
            strategy: Strategy::Baseline,
            scope: MaskScope::Both,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau_patience: None,
            epochs: 40,
            batch_size: 64,
            fisher_stride: 1,
            seed: 0,
            init_seed: None,
            sampling_seed: None,
            output_dir: PathBuf::from("run"),
            fisher_dump: false,
        }
    }
}

/// Independent 64-bit seed for one named stream of a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

pub const STREAM_DATA: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SAMPLING: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse {:?}", s.trim())))
        .collect()
}

fn parse_one<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("cannot parse {v:?} as a boolean")),
    }
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Default)]
struct Raw {
    data_path: Option<PathBuf>,
    modalities: Option<usize>,
    classes: Option<usize>,
    dims: Option<Vec<usize>>,
    snr: Option<Vec<f64>>,
    train: Option<usize>,
    val: Option<usize>,
    test: Option<usize>,
    data_seed: Option<u64>,
    strategy: Option<String>,
    v: Option<Vec<f64>>,
    rho: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Parses configuration text; `path` is used only in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut raw = Raw::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| AmssError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {trimmed:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "seed" => cfg.seed = parse_one(value)?,
                    "seed.init" => cfg.init_seed = Some(parse_one(value)?),
                    "seed.sampling" => cfg.sampling_seed = Some(parse_one(value)?),
                    "data.path" => raw.data_path = Some(PathBuf::from(value)),
                    "data.modalities" => raw.modalities = Some(parse_one(value)?),
                    "data.classes" => raw.classes = Some(parse_one(value)?),
                    "data.dims" => raw.dims = Some(parse_list(value)?),
                    "data.snr" => raw.snr = Some(parse_list(value)?),
                    "data.train" => raw.train = Some(parse_one(value)?),
                    "data.val" => raw.val = Some(parse_one(value)?),
                    "data.test" => raw.test = Some(parse_one(value)?),
                    "data.seed" => raw.data_seed = Some(parse_one(value)?),
                    "model.fusion" => cfg.model.fusion = Fusion::parse(value).map_err(|e| e.to_string())?,
                    "model.widths" => cfg.model.widths = parse_list(value)?,
                    "strategy" => raw.strategy = Some(value.to_ascii_lowercase()),
                    "strategy.v" => raw.v = Some(parse_list(value)?),
                    "strategy.rho" => raw.rho = Some(parse_list(value)?),
                    "mask.scope" => cfg.scope = MaskScope::parse(value).map_err(|e| e.to_string())?,
                    "significance.lambda" => cfg.lambda = parse_one(value)?,
                    "significance.tau" => cfg.tau = parse_one(value)?,
                    "optim.lr" => cfg.lr = parse_one(value)?,
                    "optim.momentum" => cfg.momentum = parse_one(value)?,
                    "optim.weight_decay" => cfg.weight_decay = parse_one(value)?,
                    "optim.plateau_patience" => {
                        cfg.plateau_patience = match value {
                            "none" | "off" => None,
                            v => Some(parse_one(v)?),
                        }
                    }
                    "train.epochs" => cfg.epochs = parse_one(value)?,
                    "train.batch_size" => cfg.batch_size = parse_one(value)?,
                    "train.fisher_stride" => cfg.fisher_stride = parse_one(value)?,
                    "output.dir" => cfg.output_dir = PathBuf::from(value),
                    "output.fisher_dump" => cfg.fisher_dump = parse_bool(value)?,
                    k if k.starts_with("model.widths.") => {
                        let m: usize = parse_one(&k["model.widths.".len()..])?;
                        cfg.model.overrides.push((m, parse_list(value)?));
                    }
                    k => return Err(format!("unknown key `{k}`")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        cfg.finish(raw)?;
        Ok(cfg)
    }

    fn finish(&mut self, raw: Raw) -> Result<()> {
        let has_inline = raw.modalities.is_some()
            || raw.classes.is_some()
            || raw.dims.is_some()
            || raw.snr.is_some()
            || raw.train.is_some()
            || raw.val.is_some()
            || raw.test.is_some()
            || raw.data_seed.is_some();
        if let Some(p) = raw.data_path {
            if has_inline {
                return Err(AmssError::Config(
                    "data.path cannot be combined with generated-data keys".into(),
                ));
            }
            self.data = DataSource::File(p);
        } else {
            let DataSource::Generate(mut spec) = self.data.clone() else {
                unreachable!("default generates")
            };
            if let Some(m) = raw.modalities {
                spec.modalities = m;
                if raw.dims.is_none() {
                    spec.dims = vec![spec.dims[0]; m];
                }
                if raw.snr.is_none() {
                    spec.snr = vec![1.0; m];
                }
            }
            if let Some(v) = raw.classes {
                spec.classes = v;
            }
            if let Some(v) = raw.dims {
                spec.dims = v;
            }
            if let Some(v) = raw.snr {
                spec.snr = v;
            }
            spec.train = raw.train.unwrap_or(spec.train);
            spec.val = raw.val.unwrap_or(spec.val);
            spec.test = raw.test.unwrap_or(spec.test);
            spec.seed = raw.data_seed.unwrap_or_else(|| derive_seed(self.seed, STREAM_DATA));
            spec.validate()?;
            self.data = DataSource::Generate(spec);
        }

        let name = raw.strategy.as_deref().unwrap_or("baseline");
        if raw.v.is_some() && name != "global_wise" {
            return Err(AmssError::Config("strategy.v is only valid with strategy = global_wise".into()));
        }
        if raw.rho.is_some() && name != "uniform_mask" {
            return Err(AmssError::Config("strategy.rho is only valid with strategy = uniform_mask".into()));
        }
        self.strategy = match name {
            "baseline" => Strategy::Baseline,
            "global_wise" => Strategy::GlobalWise(
                raw.v
                    .ok_or_else(|| AmssError::Config("strategy = global_wise requires strategy.v".into()))?,
            ),
            "uniform_mask" => Strategy::UniformMask(
                raw.rho
                    .ok_or_else(|| AmssError::Config("strategy = uniform_mask requires strategy.rho".into()))?,
            ),
            "amss" => Strategy::Amss,
            "amss_plus" => Strategy::AmssPlus,
            "theoretical_unbiased" => Strategy::TheoreticalUnbiased,
            other => return Err(AmssError::Config(format!("unknown strategy {other:?}"))),
        };
        self.validate()
    }

    /// Checks ranges that do not depend on the dataset contents.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmssError::Config(m));
        match &self.strategy {
            Strategy::GlobalWise(v) | Strategy::UniformMask(v) => {
                if let Some(x) = v.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
                    return bad(format!("{} coefficient {x} outside (0, 1]", self.strategy.name()));
                }
                if let DataSource::Generate(spec) = &self.data {
                    if v.len() != spec.modalities {
                        return bad(format!(
                            "{} lists {} coefficients for {} modalities",
                            self.strategy.name(),
                            v.len(),
                            spec.modalities
                        ));
                    }
                }
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("significance.lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("significance.tau {} must be > 0", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("optim.lr {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optim.momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("optim.weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.fisher_stride == 0 {
            return bad("train.epochs, train.batch_size and train.fisher_stride must be >= 1".into());
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return bad("model.widths must list positive widths".into());
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or_else(|| derive_seed(self.seed, STREAM_INIT))
    }

    pub fn sampling_seed(&self) -> u64 {
        self.sampling_seed
            .unwrap_or_else(|| derive_seed(self.seed, STREAM_SAMPLING))
    }

    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_SHUFFLE)
    }

    /// Output directory, resolved against `$AMSS_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    /// Serialises back to the text format; parsing the result gives an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        if let Some(v) = self.init_seed {
            kv("seed.init", v.to_string());
        }
        if let Some(v) = self.sampling_seed {
            kv("seed.sampling", v.to_string());
        }
        match &self.data {
            DataSource::File(p) => kv("data.path", p.display().to_string()),
            DataSource::Generate(d) => {
                kv("data.modalities", d.modalities.to_string());
                kv("data.classes", d.classes.to_string());
                kv("data.dims", fmt_list(&d.dims));
                kv("data.snr", fmt_list(&d.snr));
                kv("data.train", d.train.to_string());
                kv("data.val", d.val.to_string());
                kv("data.test", d.test.to_string());
                kv("data.seed", d.seed.to_string());
            }
        }
        kv("model.fusion", self.model.fusion.as_str().to_string());
        kv("model.widths", fmt_list(&self.model.widths));
        for (k, w) in &self.model.overrides {
            kv(&format!("model.widths.{k}"), fmt_list(w));
        }
        kv("strategy", self.strategy.name().to_string());
        match &self.strategy {
            Strategy::GlobalWise(v) => kv("strategy.v", fmt_list(v)),
            Strategy::UniformMask(r) => kv("strategy.rho", fmt_list(r)),
            _ => {}
        }
        kv("mask.scope", self.scope.as_str().to_string());
        kv("significance.lambda", self.lambda.to_string());
        kv("significance.tau", self.tau.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("optim.momentum", self.momentum.to_string());
        kv("optim.weight_decay", self.weight_decay.to_string());
        kv(
            "optim.plateau_patience",
            self.plateau_patience.map_or("none".into(), |p| p.to_string()),
        );
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.fisher_stride", self.fisher_stride.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv("output.fisher_dump", self.fisher_dump.to_string());
        s
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}
