//! Synthetic multi-modal classification data and its on-disk format.
//!
//! Each class `c` owns a random unit prototype `μ_c^(k)` in every modality
//! `k`; a sample of class `c` is `s_k·μ_c^(k) + ε`, `ε ~ N(0, I)`. The
//! per-modality signal scale `s_k` decides which modality dominates.
//!
//! File layout: one header line `# {json DataSpec}`, then one row per sample,
//! `split,label,<modality 0 features>,<modality 1 features>,…`, floats written
//! with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AmssError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub modalities: usize,
    pub classes: usize,
    pub dims: Vec<usize>,
    pub snr: Vec<f64>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmssError::DataSpec(m));
        if self.modalities < 1 {
            return bad("at least one modality is required".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dims.len() != self.modalities || self.snr.len() != self.modalities {
            return bad(format!(
                "dims ({}) and snr ({}) must list one entry per modality ({})",
                self.dims.len(),
                self.snr.len(),
                self.modalities
            ));
        }
        if self.dims.contains(&0) {
            return bad("feature dimensions must be >= 1".into());
        }
        if self.snr.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("signal scales must be finite and non-negative".into());
        }
        for (name, n) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if n < self.classes {
                return bad(format!(
                    "{name} size {n} is smaller than the class count {}",
                    self.classes
                ));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn row_width(&self) -> usize {
        2 + self.dims.iter().sum::<usize>()
    }
}

/// Per-modality feature matrices plus one-hot labels, sharing a row count.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Vec<Tensor>,
    pub labels: Tensor,
}

impl LabeledBatch {
    pub fn new(features: Vec<Tensor>, labels: Tensor) -> Result<Self> {
        let b = labels.rows();
        for (k, f) in features.iter().enumerate() {
            if f.shape().len() != 2 || f.rows() != b {
                return Err(AmssError::Shape {
                    layer: format!("batch modality {k}"),
                    expected: vec![b, f.cols()],
                    actual: f.shape().to_vec(),
                });
            }
        }
        Ok(Self { features, labels })
    }

    /// Builds a batch from integer class labels.
    pub fn from_indices(features: Vec<Tensor>, labels: &[usize], classes: usize) -> Result<Self> {
        let mut y = Tensor::zeros(&[labels.len(), classes]);
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(AmssError::InvalidInput(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            y.set(i, c, 1.0);
        }
        Self::new(features, y)
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modalities(&self) -> usize {
        self.features.len()
    }

    pub fn classes(&self) -> usize {
        self.labels.cols()
    }

    /// `argmax` of each label row.
    pub fn label_indices(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.labels.row(i))).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self
                .features
                .iter()
                .map(|f| f.select_rows(idx))
                .collect::<Result<_>>()?,
            labels: self.labels.select_rows(idx)?,
        })
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub train: LabeledBatch,
    pub val: LabeledBatch,
    pub test: LabeledBatch,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &LabeledBatch {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Draws a dataset; identical specs give identical datasets.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let prototypes: Vec<Vec<Vec<f64>>> = spec
        .dims
        .iter()
        .map(|&d| {
            (0..spec.classes)
                .map(|_| random_unit_vector(&mut rng, d))
                .collect()
        })
        .collect();

    let mut draw = |n: usize| -> Result<LabeledBatch> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(spec.modalities);
        for k in 0..spec.modalities {
            let d = spec.dims[k];
            let mut data = Vec::with_capacity(n * d);
            for &c in &labels {
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(spec.snr[k] * prototypes[k][c][j] + noise);
                }
            }
            features.push(Tensor::matrix(n, d, data)?);
        }
        LabeledBatch::from_indices(features, &labels, spec.classes)
    };

    let train = draw(spec.train)?;
    let val = draw(spec.val)?;
    let test = draw(spec.test)?;
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

fn random_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Serializes a dataset in the documented text format.
pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(&serde_json::to_string(&dataset.spec)?);
    out.push('\n');
    for split in [Split::Train, Split::Val, Split::Test] {
        let batch = dataset.split(split);
        let labels = batch.label_indices();
        for (i, label) in labels.iter().enumerate() {
            write!(out, "{},{}", split.as_str(), label).unwrap();
            for f in &batch.features {
                for v in f.row(i) {
                    write!(out, ",{v:.16e}").unwrap();
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, dataset_to_string(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

/// Parses the text format; `path` is only used in error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| AmssError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected `# {spec}` header".into()))?;
    let json = header
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "header must start with `#`".into()))?;
    let spec: DataSpec = serde_json::from_str(json.trim())
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    spec.validate().map_err(|e| AmssError::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;

    let width = spec.row_width();
    let mut buckets: [(Vec<usize>, Vec<Vec<f64>>); 3] = Default::default();
    let mut first_row = true;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            let msg = format!(
                "expected {width} fields for {} modalities with dims {:?}, found {}",
                spec.modalities,
                spec.dims,
                fields.len()
            );
            if first_row {
                return Err(AmssError::Schema {
                    path: path.to_path_buf(),
                    msg: format!("line {lineno}: {msg}"),
                });
            }
            return Err(parse_err(lineno, msg));
        }
        first_row = false;
        let split = Split::parse(fields[0])
            .ok_or_else(|| parse_err(lineno, format!("field 1: unknown split `{}`", fields[0])))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("field 2: bad label `{}`", fields[1])))?;
        if label >= spec.classes {
            return Err(parse_err(
                lineno,
                format!("field 2: label {label} out of range for {} classes", spec.classes),
            ));
        }
        let mut values = Vec::with_capacity(width - 2);
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("field {}: bad number `{f}`", j + 3)))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("field {}: non-finite value", j + 3)));
            }
            values.push(v);
        }
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        buckets[slot].0.push(label);
        buckets[slot].1.push(values);
    }

    let last_line = text.lines().count();
    let mut splits = Vec::with_capacity(3);
    for (slot, (split, expected)) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ]
    .into_iter()
    .enumerate()
    {
        let (labels, rows) = &buckets[slot];
        if labels.len() != expected {
            return Err(parse_err(
                last_line,
                format!(
                    "{} split has {} rows, header declares {expected} (truncated file?)",
                    split.as_str(),
                    labels.len()
                ),
            ));
        }
        let mut features = Vec::with_capacity(spec.modalities);
        let mut offset = 0;
        for &d in &spec.dims {
            let mut data = Vec::with_capacity(rows.len() * d);
            for r in rows {
                data.extend_from_slice(&r[offset..offset + d]);
            }
            features.push(Tensor::matrix(rows.len(), d, data)?);
            offset += d;
        }
        splits.push(LabeledBatch::from_indices(features, labels, spec.classes)?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        spec,
        train,
        val,
        test,
    })
}
