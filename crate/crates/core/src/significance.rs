//! Modal significance: a mutual-information-rate estimate per modality,
//! smoothed with an exponential moving average and mapped to per-modality
//! update ratios `ρ_k = 1 − softmax(u/τ)_k`.

use crate::data::argmax;
use crate::error::{AmssError, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to `q(y|x)` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower bound on the modality entropy used as the rate denominator.
pub const ENTROPY_FLOOR: f64 = 1e-6;
/// Significance floor applied before forming the imbalance ratio.
pub const SIGNIFICANCE_FLOOR: f64 = 1e-6;

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.25;

/// Shannon entropy (nats) of the empirical label distribution of a one-hot
/// matrix.
pub fn label_entropy(labels: &Tensor) -> Result<f64> {
    if labels.shape().len() != 2 || labels.rows() == 0 {
        return Err(AmssError::InvalidInput("labels must be a non-empty B×C matrix".into()));
    }
    let b = labels.rows();
    let c = labels.cols();
    let mut counts = vec![0usize; c];
    for i in 0..b {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(AmssError::InvalidInput(format!("label row {i} is not one-hot")));
        }
        counts[argmax(row)] += 1;
    }
    Ok(entropy_of_counts(&counts, b))
}

fn entropy_of_counts(counts: &[usize], total: usize) -> f64 {
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Entropy (nats) of a probability vector; zero entries contribute 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Barber-Agakov bound `H(Y) + (1/B) Σ ln q(y_i | x_i)`. May be negative.
pub fn mi_lower_bound(true_class_probs: &[f64], h_y: f64) -> Result<f64> {
    if true_class_probs.is_empty() {
        return Err(AmssError::InvalidInput("no probabilities".into()));
    }
    if h_y < 0.0 || !h_y.is_finite() {
        return Err(AmssError::InvalidInput(format!("label entropy must be >= 0, got {h_y}")));
    }
    let mut acc = 0.0;
    for (i, &p) in true_class_probs.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(AmssError::InvalidInput(format!(
                "probability {p} at index {i} outside (0, 1]"
            )));
        }
        acc += p.ln();
    }
    Ok(h_y + acc / true_class_probs.len() as f64)
}

/// `mi_lb / max(h_x, ENTROPY_FLOOR)`.
pub fn mi_rate(mi_lb: f64, h_x: f64) -> f64 {
    mi_lb / h_x.max(ENTROPY_FLOOR)
}

/// Entropy of the batch-mean predictive distribution, the stand-in for the
/// modality entropy in the rate denominator.
pub fn mean_prediction_entropy(probs: &Tensor) -> f64 {
    let mean = probs.sum_rows().scale(1.0 / probs.rows() as f64);
    entropy(mean.data())
}

/// One modality's batch-level significance terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignificanceSample {
    pub mi_lower_bound: f64,
    pub modality_entropy: f64,
    pub rate: f64,
}

/// `û` for one modality from its unimodal predictions `probs` (B×C) and the
/// one-hot `labels`.
pub fn modality_significance(probs: &Tensor, labels: &Tensor) -> Result<SignificanceSample> {
    if probs.shape() != labels.shape() {
        return Err(AmssError::Shape {
            layer: "significance".into(),
            expected: labels.shape().to_vec(),
            actual: probs.shape().to_vec(),
        });
    }
    let h_y = label_entropy(labels)?;
    let true_probs: Vec<f64> = (0..labels.rows())
        .map(|i| probs.get(i, argmax(labels.row(i))).clamp(PROB_FLOOR, 1.0))
        .collect();
    let mi = mi_lower_bound(&true_probs, h_y)?;
    let h_x = mean_prediction_entropy(probs).max(ENTROPY_FLOOR);
    Ok(SignificanceSample {
        mi_lower_bound: mi,
        modality_entropy: h_x,
        rate: mi_rate(mi, h_x),
    })
}

/// Per-modality update ratios; entries lie in (0, 1) and sum to `K − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioVector(Vec<f64>);

impl RatioVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ρ_k = 1 − exp(u_k/τ) / Σ_n exp(u_n/τ)`, evaluated as the softmax mass
/// of the other modalities so a dominant modality's ratio does not cancel
/// to zero. Ratios that still underflow are held at the smallest positive
/// double.
pub fn update_ratios(u: &[f64], tau: f64) -> RatioVector {
    let z: Vec<f64> = u.iter().map(|v| v / tau).collect();
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum();
    RatioVector(
        (0..e.len())
            .map(|k| {
                let others: f64 = e.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
                (others / total).max(f64::MIN_POSITIVE)
            })
            .collect(),
    )
}

/// `max(u1, ε) / max(u2, ε)`.
pub fn imbalance_degree(u1: f64, u2: f64) -> f64 {
    u1.max(SIGNIFICANCE_FLOOR) / u2.max(SIGNIFICANCE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceState {
    u: Vec<f64>,
    lambda: f64,
    tau: f64,
    initialized: bool,
}

impl SignificanceState {
    pub fn new(modalities: usize, lambda: f64, tau: f64) -> Result<Self> {
        if modalities < 2 {
            return Err(AmssError::InvalidInput("need at least 2 modalities".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(AmssError::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AmssError::InvalidInput(format!("tau must be > 0, got {tau}")));
        }
        Ok(Self {
            u: vec![0.0; modalities],
            lambda,
            tau,
            initialized: false,
        })
    }

    /// Starts from an explicit `u` instead of taking the first `û` verbatim.
    pub fn with_initial(u: Vec<f64>, lambda: f64, tau: f64) -> Result<Self> {
        let mut s = Self::new(u.len(), lambda, tau)?;
        s.u = u;
        s.initialized = true;
        Ok(s)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// `u ← λu + (1−λ)û`; the first call sets `u = û`.
    pub fn update(&mut self, u_hat: &[f64]) -> Result<()> {
        if u_hat.len() != self.u.len() {
            return Err(AmssError::InvalidInput(format!(
                "expected {} significance values, got {}",
                self.u.len(),
                u_hat.len()
            )));
        }
        if u_hat.iter().any(|v| !v.is_finite()) {
            return Err(AmssError::InvalidInput("non-finite significance".into()));
        }
        if self.initialized {
            for (u, &h) in self.u.iter_mut().zip(u_hat) {
                *u = self.lambda * *u + (1.0 - self.lambda) * h;
            }
        } else {
            self.u.copy_from_slice(u_hat);
            self.initialized = true;
        }
        Ok(())
    }

    pub fn ratios(&self) -> RatioVector {
        update_ratios(&self.u, self.tau)
    }

    /// `u_1 / u_2` with both floored.
    pub fn imbalance_degree(&self) -> f64 {
        imbalance_degree(self.u[0], self.u[1])
    }
}
