//! Self-check suites behind `amss verify`: analytic gradients against finite
//! differences, Monte Carlo checks of the mask estimators, and goodness of
//! fit of the sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::LabeledBatch;
use crate::error::Result;
use crate::gradcheck::{finite_diff_gradient, max_relative_error};
use crate::mask::{accumulate_fisher, build_mask, MaskMode, MaskScope, UnitImportance};
use crate::model::{build_model, Fusion, Head, ModelSpec, MultiModalModel};
use crate::sampling::{inclusion_probabilities, sample_units, subset_probabilities};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn random_batch<R: Rng + ?Sized>(dims: &[usize], classes: usize, b: usize, rng: &mut R) -> Result<LabeledBatch> {
    let features = dims
        .iter()
        .map(|&d| Tensor::matrix(b, d, (0..b * d).map(|_| rng.random_range(-1.5..1.5)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::from_indices(features, &labels, classes)
}

/// Worst relative error of backward against central differences
/// (`eps = 1e-5`) over every fusion, head and seed.
pub fn gradient_check(seeds: u64) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
            let spec = ModelSpec::uniform(vec![3, 4], vec![5, 4], fusion, 3);
            let mut model = build_model(&spec, &mut rng)?;
            perturb_biases(&mut model, &mut rng);
            let batch = random_batch(&spec.input_dims, 3, 4, &mut rng)?;
            for head in [Head::Joint, Head::Unimodal(0), Head::Unimodal(1)] {
                let (_, cache) = model.forward_head(&batch, head)?;
                let analytic = model.backward(cache)?;
                let numeric = finite_diff_gradient(|p| model.loss_with_params(p, &batch, head), model.params(), 1e-5)?;
                worst = worst.max(max_relative_error(&analytic, &numeric));
            }
        }
    }
    Ok(CheckReport::new(
        "gradient check",
        worst <= 1e-5,
        format!("max relative error {worst:.3e} over {seeds} seeds (limit 1e-5)"),
    ))
}

/// Random non-zero biases and fusion logits so every code path carries
/// signal.
pub fn perturb_biases<R: Rng + ?Sized>(model: &mut MultiModalModel, rng: &mut R) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().get(id).shape().len() == 1 {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Fisher probabilities and gradient of a `units`-wide first encoder layer,
/// the fixed target for the estimator checks.
pub fn estimator_fixture(seed: u64, units: usize) -> Result<(UnitImportance, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec::uniform(vec![4, 3], vec![units], Fusion::Concat, 3);
    let model = build_model(&spec, &mut rng)?;
    let batch = random_batch(&spec.input_dims, 3, 16, &mut rng)?;
    let mut importance = accumulate_fisher(&model, &batch, 0, MaskScope::Backbone)?;
    importance.layers.truncate(1);
    let (_, cache) = model.forward(&batch)?;
    let grads = model.backward(cache)?;
    let layer = &importance.layers[0];
    let mut g = grads.get(layer.weight).data().to_vec();
    g.extend_from_slice(grads.get(layer.bias).data());
    Ok((importance, g))
}

fn masked_mean(
    importance: &UnitImportance,
    g: &[f64],
    n: usize,
    mode: MaskMode,
    draws: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let layer = &importance.layers[0];
    let ratio = n as f64 / layer.units() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; g.len()];
    let mut sq = vec![0.0; g.len()];
    for _ in 0..draws {
        let sel = sample_units(&layer.probs, n, &mut rng)?;
        let plan = build_mask(&[sel], importance, ratio, mode)?;
        let masks = plan.param_masks();
        let m: Vec<f64> = masks[0].1.data().iter().chain(masks[1].1.data()).copied().collect();
        for j in 0..g.len() {
            let x = g[j] * m[j];
            sum[j] += x;
            sq[j] += x * x;
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0) / n).sqrt())
        .collect();
    Ok((mean, se))
}

/// Inverse-inclusion masks average to the true gradient (5 units, 2 drawn).
pub fn unbiasedness_check(draws: usize, seed: u64) -> Result<CheckReport> {
    let (imp, g) = estimator_fixture(seed, 5)?;
    let (mean, se) = masked_mean(&imp, &g, 2, MaskMode::TheoreticalUnbiased, draws, seed + 1)?;
    let worst = mean
        .iter()
        .zip(&g)
        .zip(&se)
        .map(|((m, g), s)| if *s > 0.0 { (m - g).abs() / s } else if m == g { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    Ok(CheckReport::new(
        "unbiasedness",
        worst <= 4.0,
        format!("max deviation {worst:.2} standard errors over {draws} draws (limit 4)"),
    ))
}

/// Moderately skewed importance over eight units for the bias check. With
/// six of eight drawn every inclusion probability exceeds 0.5, so 200k
/// draws resolve a 1% relative deviation at more than four standard errors.
pub const BIAS_PROBS: [f64; 8] = [0.2, 0.18, 0.15, 0.13, 0.11, 0.09, 0.08, 0.06];
pub const BIAS_DRAWN: usize = 6;

/// 0/1 masks average to `g ⊙ π`.
pub fn bias_check(draws: usize, seed: u64) -> Result<CheckReport> {
    let (mut imp, g) = estimator_fixture(seed, BIAS_PROBS.len())?;
    imp.layers[0].probs = BIAS_PROBS.to_vec();
    let layer = &imp.layers[0];
    let pi = inclusion_probabilities(&layer.probs, BIAS_DRAWN)?;
    let (mean, _) = masked_mean(&imp, &g, BIAS_DRAWN, MaskMode::Amss, draws, seed + 1)?;
    let weights = layer.units() * layer.fan_in;
    let worst = mean
        .iter()
        .enumerate()
        .filter(|(j, _)| g[*j] != 0.0)
        .map(|(j, m)| {
            let unit = if j < weights { j / layer.fan_in } else { j - weights };
            let expect = g[j] * pi[unit];
            (m - expect).abs() / expect.abs()
        })
        .fold(0.0, f64::max);
    Ok(CheckReport::new(
        "0/1 mask bias",
        worst <= 0.01,
        format!("max relative deviation from g*pi {worst:.4} over {draws} draws (limit 0.01)"),
    ))
}

/// Subset frequencies against exact probabilities, and a chi-square test
/// of the equal-weight sampler against uniform subsets.
pub fn sampling_check(draws: usize, seed: u64) -> Result<CheckReport> {
    let p = [0.5, 0.3, 0.2];
    let exact = subset_probabilities(&p, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_units(&p, 2, &mut rng)?).or_insert(0usize) += 1;
    }
    let n = draws as f64;
    let mut worst_z: f64 = 0.0;
    for (set, &q) in &exact {
        let f = *counts.get(set).unwrap_or(&0) as f64 / n;
        worst_z = worst_z.max((f - q).abs() / (q * (1.0 - q) / n).sqrt());
    }

    let l = 6;
    let uniform = vec![1.0; l];
    let mut hist = std::collections::BTreeMap::new();
    for _ in 0..draws {
        *hist.entry(sample_units(&uniform, 2, &mut rng)?).or_insert(0usize) += 1;
    }
    let cells = l * (l - 1) / 2;
    let expect = n / cells as f64;
    let stat: f64 = (0..l)
        .flat_map(|a| ((a + 1)..l).map(move |b| vec![a, b]))
        .map(|k| {
            let o = *hist.get(&k).unwrap_or(&0) as f64;
            (o - expect).powi(2) / expect
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new((cells - 1) as f64).expect("dof > 0").cdf(stat);
    Ok(CheckReport::new(
        "sampling",
        worst_z <= 3.0 && p_value > 0.01,
        format!("max |z| {worst_z:.2} (limit 3), uniform chi-square p = {p_value:.3} (limit 0.01)"),
    ))
}

pub fn run_all(draws: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        gradient_check(10)?,
        unbiasedness_check(draws, seed)?,
        bias_check(draws, seed)?,
        sampling_check(draws, seed)?,
    ])
}
