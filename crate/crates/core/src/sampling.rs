//! Weighted sampling without replacement (successive draws proportional to
//! the remaining weights) and its exact inclusion probabilities.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{AmssError, Result};

/// Largest unit count for which [`inclusion_probabilities`] enumerates
/// exactly.
pub const MAX_EXACT_UNITS: usize = 12;

fn check_weights(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(AmssError::Sampling("empty weight vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(AmssError::Sampling(format!("invalid weight {v}")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(AmssError::Sampling("weights sum to zero".into()));
    }
    Ok(total)
}

fn check_count(n: usize, len: usize) -> Result<()> {
    if n == 0 || n > len {
        return Err(AmssError::Sampling(format!(
            "sample size {n} must lie in 1..={len}"
        )));
    }
    Ok(())
}

/// Draws `n` distinct indices, each draw proportional to the weights of the
/// indices not yet taken. Returns the indices sorted ascending.
///
/// Fails if `n` exceeds the number of strictly positive weights.
pub fn sample_without_replacement<R: Rng + ?Sized>(p: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_weights(p)?;
    check_count(n, p.len())?;
    let positive = p.iter().filter(|&&v| v > 0.0).count();
    if n > positive {
        return Err(AmssError::Sampling(format!(
            "cannot draw {n} distinct indices from {positive} positive weights"
        )));
    }
    Ok(draw(p, n, rng))
}

/// Like [`sample_without_replacement`], but once every positive weight has
/// been drawn the remaining picks are uniform over the zero-weight indices.
pub fn sample_units<R: Rng + ?Sized>(p: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_count(n, p.len())?;
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AmssError::Sampling("weights must be finite and non-negative".into()));
    }
    Ok(draw(p, n, rng))
}

fn draw<R: Rng + ?Sized>(p: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let remaining: f64 = p
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| !t)
            .map(|(&w, _)| w)
            .sum();
        let pick = if remaining > 0.0 {
            let target = rng.random::<f64>() * remaining;
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_positive = None;
            for (j, &w) in p.iter().enumerate() {
                if taken[j] || w <= 0.0 {
                    continue;
                }
                last_positive = Some(j);
                acc += w;
                if target < acc {
                    chosen = Some(j);
                    break;
                }
            }
            // Rounding can leave `target` just past the final cumulative sum.
            chosen.or(last_positive).expect("positive mass remains")
        } else {
            let free: Vec<usize> = (0..p.len()).filter(|&j| !taken[j]).collect();
            free[rng.random_range(0..free.len())]
        };
        taken[pick] = true;
        out.push(pick);
    }
    out.sort_unstable();
    out
}

/// Exact probability of every `n`-subset under successive sampling, keyed
/// by the sorted index list. Sums over all draw orders via a subset DP.
pub fn subset_probabilities(p: &[f64], n: usize) -> Result<BTreeMap<Vec<usize>, f64>> {
    let table = subset_table(p, n)?;
    let mut out = BTreeMap::new();
    for (mask, &prob) in table.iter().enumerate() {
        if (mask as u32).count_ones() as usize == n && prob > 0.0 {
            let idx: Vec<usize> = (0..p.len()).filter(|j| mask & (1 << j) != 0).collect();
            out.insert(idx, prob);
        }
    }
    Ok(out)
}

fn subset_table(p: &[f64], n: usize) -> Result<Vec<f64>> {
    check_weights(p)?;
    check_count(n, p.len())?;
    let l = p.len();
    if l > MAX_EXACT_UNITS {
        return Err(AmssError::EnumerationTooLarge {
            units: l,
            limit: MAX_EXACT_UNITS,
        });
    }
    let mut prob = vec![0.0; 1 << l];
    prob[0] = 1.0;
    // Masks in increasing numeric order visit every subset before its supersets.
    for mask in 0..(1usize << l) {
        let size = mask.count_ones() as usize;
        if size >= n || prob[mask] == 0.0 {
            continue;
        }
        let remaining: f64 = (0..l).filter(|j| mask & (1 << j) == 0).map(|j| p[j]).sum();
        for j in 0..l {
            if mask & (1 << j) != 0 {
                continue;
            }
            let step = if remaining > 0.0 {
                p[j] / remaining
            } else {
                1.0 / (l - size) as f64
            };
            prob[mask | (1 << j)] += prob[mask] * step;
        }
    }
    Ok(prob)
}

/// Exact inclusion probabilities `π_j = P(j ∈ sample)` for `L ≤ 12` units;
/// `Σ_j π_j = n`.
pub fn inclusion_probabilities(p: &[f64], n: usize) -> Result<Vec<f64>> {
    let table = subset_table(p, n)?;
    let l = p.len();
    let mut pi = vec![0.0; l];
    for (mask, &prob) in table.iter().enumerate() {
        if (mask as u32).count_ones() as usize != n {
            continue;
        }
        for (j, v) in pi.iter_mut().enumerate() {
            if mask & (1 << j) != 0 {
                *v += prob;
            }
        }
    }
    Ok(pi)
}

/// Monte Carlo estimate of inclusion probabilities for layers too wide to
/// enumerate. Zero estimates are floored at half a draw so `1/π` stays finite.
pub fn estimate_inclusion_probabilities<R: Rng + ?Sized>(
    p: &[f64],
    n: usize,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_count(n, p.len())?;
    if draws == 0 {
        return Err(AmssError::Sampling("need at least one draw".into()));
    }
    let mut counts = vec![0usize; p.len()];
    for _ in 0..draws {
        for j in sample_units(p, n, rng)? {
            counts[j] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| (c as f64).max(0.5) / draws as f64)
        .collect())
}
