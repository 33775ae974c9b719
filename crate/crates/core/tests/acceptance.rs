//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use amss_core::checkpoint;
use amss_core::config::{DataSource, ModelConfig, RunConfig, Strategy};
use amss_core::data::{generate, DataSpec, Dataset};
use amss_core::mask::{build_mask, MaskMode};
use amss_core::model::{build_model, Fusion, Head, ModelSpec};
use amss_core::params::GradientSet;
use amss_core::sampling::sample_units;
use amss_core::significance::update_ratios;
use amss_core::sweep::grid_sweep_on;
use amss_core::train::{metrics_csv, run_on_dataset, write_run, RunOutcome};
use amss_core::verify::{estimator_fixture, perturb_biases, random_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Verdict {
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn verdict(passed: bool, detail: String, started: Instant) -> Verdict {
    Verdict {
        passed,
        detail,
        elapsed: started.elapsed(),
    }
}

/// Inclusion probabilities of successive weighted draws without
/// replacement, by walking every ordered draw sequence.
fn inclusion_oracle(p: &[f64], n: usize) -> Vec<f64> {
    fn walk(p: &[f64], n: usize, taken: &mut Vec<usize>, prob: f64, out: &mut [f64]) {
        if taken.len() == n {
            for &j in taken.iter() {
                out[j] += prob;
            }
            return;
        }
        let left: f64 = (0..p.len()).filter(|j| !taken.contains(j)).map(|j| p[j]).sum();
        for j in 0..p.len() {
            if !taken.contains(&j) && p[j] > 0.0 {
                taken.push(j);
                walk(p, n, taken, prob * p[j] / left, out);
                taken.pop();
            }
        }
    }
    let mut out = vec![0.0; p.len()];
    walk(p, n, &mut Vec::new(), 1.0, &mut out);
    out
}

// 1. Analytic gradients against central differences.
fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for fusion in [Fusion::Concat, Fusion::Sum, Fusion::Weight] {
            let dims = vec![rng.random_range(2..6), rng.random_range(2..6)];
            let spec = ModelSpec::uniform(dims, vec![rng.random_range(3..7), rng.random_range(2..5)], fusion, 3);
            let mut model = build_model(&spec, &mut rng).unwrap();
            perturb_biases(&mut model, &mut rng);
            let batch = random_batch(&spec.input_dims, 3, 5, &mut rng).unwrap();
            for head in [Head::Joint, Head::Unimodal(0), Head::Unimodal(1)] {
                let (_, cache) = model.forward_head(&batch, head).unwrap();
                let analytic: GradientSet = model.backward(cache).unwrap();
                let mut p = model.params().clone();
                let ids: Vec<_> = p.ids().collect();
                for id in ids {
                    for j in 0..p.get(id).len() {
                        let orig = p.get(id).data()[j];
                        p.get_mut(id).data_mut()[j] = orig + eps;
                        let up = model.loss_with_params(&p, &batch, head).unwrap();
                        p.get_mut(id).data_mut()[j] = orig - eps;
                        let down = model.loss_with_params(&p, &batch, head).unwrap();
                        p.get_mut(id).data_mut()[j] = orig;
                        let numeric = (up - down) / (2.0 * eps);
                        let a = analytic.get(id).data()[j];
                        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
                        checked += 1;
                    }
                }
            }
        }
    }
    let fast = started.elapsed() < Duration::from_secs(60);
    verdict(
        worst <= 1e-5 && fast,
        format!("max relative error {worst:.2e} over {checked} coordinates, 10 seeds, 3 fusions, 3 heads"),
        started,
    )
}

/// Mean and standard error of `g ⊙ mask` over `draws` sampled plans.
fn masked_moments(n: usize, probs: Option<&[f64]>, mode: MaskMode, draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let units = probs.map_or(5, <[f64]>::len);
    let (mut imp, g) = estimator_fixture(seed, units).unwrap();
    if let Some(p) = probs {
        imp.layers[0].probs = p.to_vec();
    }
    let layer = imp.layers[0].clone();
    let ratio = n as f64 / units as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sum = vec![0.0; g.len()];
    let mut sq = vec![0.0; g.len()];
    for _ in 0..draws {
        let sel = sample_units(&layer.probs, n, &mut rng).unwrap();
        let plan = build_mask(&[sel], &imp, ratio, mode).unwrap();
        let vals = &plan.layers[0].unit_values;
        for (j, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            let unit = if j < units * layer.fan_in { j / layer.fan_in } else { j - units * layer.fan_in };
            let x = g[j] * vals[unit];
            *s += x;
            *q += x * x;
        }
    }
    let d = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let se = sq.iter().zip(&mean).map(|(q, m)| ((q / d - m * m).max(0.0) / d).sqrt()).collect();
    let unit_of = (0..g.len())
        .map(|j| if j < units * layer.fan_in { (j / layer.fan_in) as f64 } else { (j - units * layer.fan_in) as f64 })
        .collect();
    (g, mean, se, unit_of)
}

// 2. Inverse-inclusion masks are unbiased.
fn unbiasedness() -> Verdict {
    let started = Instant::now();
    let (g, mean, se, _) = masked_moments(2, None, MaskMode::TheoreticalUnbiased, 200_000, 21);
    let worst = g
        .iter()
        .zip(&mean)
        .zip(&se)
        .map(|((g, m), s)| if *s > 0.0 { (m - g).abs() / s } else { (m - g).abs() * f64::INFINITY })
        .fold(0.0, f64::max);
    let fast = started.elapsed() < Duration::from_secs(120);
    verdict(
        worst <= 4.0 && fast,
        format!("L = 5, n = 2, 200000 draws: worst deviation {worst:.2} standard errors"),
        started,
    )
}

// 3. 0/1 masks average to g ⊙ π.
fn bias_quantification() -> Verdict {
    let started = Instant::now();
    // Six of eight units kept, so every π exceeds 0.5 and 200k draws can
    // resolve a 1% relative deviation.
    let p = [0.2, 0.18, 0.15, 0.13, 0.11, 0.09, 0.08, 0.06];
    let n = 6;
    let pi = inclusion_oracle(&p, n);
    let (g, mean, _, unit_of) = masked_moments(n, Some(&p), MaskMode::Amss, 200_000, 33);
    let worst = g
        .iter()
        .zip(&mean)
        .zip(&unit_of)
        .filter(|((g, _), _)| **g != 0.0)
        .map(|((g, m), u)| {
            let want = g * pi[*u as usize];
            (m - want).abs() / want.abs()
        })
        .fold(0.0, f64::max);
    verdict(
        worst <= 0.01,
        format!("L = 8, n = 6, 200000 draws: worst relative deviation from g*pi {worst:.4}"),
        started,
    )
}

// 4. Sampler frequencies.
fn sampling_correctness() -> Verdict {
    let started = Instant::now();
    let draws = 200_000;
    let p = [0.5, 0.3, 0.2];
    // P({i, j}) = p_i p_j / (1 − p_i) + p_j p_i / (1 − p_j).
    let pair = |i: usize, j: usize| p[i] * p[j] / (1.0 - p[i]) + p[j] * p[i] / (1.0 - p[j]);
    let expected = [(vec![0, 1], pair(0, 1)), (vec![0, 2], pair(0, 2)), (vec![1, 2], pair(1, 2))];
    let quoted: [f64; 3] = [0.5143, 0.3250, 0.1607];
    let quoted_ok = expected.iter().zip(quoted).all(|((_, e), q)| (e - q).abs() < 5e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_units(&p, 2, &mut rng).unwrap()).or_default() += 1;
    }
    let n = draws as f64;
    let worst_z = expected
        .iter()
        .map(|(set, q)| {
            let f = *counts.get(set).unwrap_or(&0) as f64 / n;
            (f - q).abs() / (q * (1.0 - q) / n).sqrt()
        })
        .fold(0.0, f64::max);

    let l = 6;
    let mut hist: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *hist.entry(sample_units(&vec![1.0 / l as f64; l], 3, &mut rng).unwrap()).or_default() += 1;
    }
    let cells = 20; // C(6, 3)
    let e = n / cells as f64;
    let observed: usize = hist.len();
    let chi: f64 = hist.values().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>() + (cells - observed) as f64 * e;
    let pv = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi);
    verdict(
        quoted_ok && worst_z <= 3.0 && pv > 0.01,
        format!("weighted pairs worst |z| {worst_z:.2}; uniform 3-of-6 chi-square {chi:.1} on 19 dof, p = {pv:.3}"),
        started,
    )
}

// 5. Ratio algebra.
fn ratio_algebra() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..3000 {
        let k = rng.random_range(2..=4);
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.5)).collect();
        let tau = 10f64.powf(rng.random_range(-2.0..1.5));
        let r = update_ratios(&u, tau);
        worst = worst.max((r.as_slice().iter().sum::<f64>() - (k as f64 - 1.0)).abs());
    }
    let taus = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
    let mut monotone = true;
    for u in [vec![0.6, 0.2], vec![0.9, 0.85], vec![0.3, 0.1, 0.05], vec![0.7, 0.4, 0.2, 0.1]] {
        let spread: Vec<f64> = taus
            .iter()
            .map(|&t| {
                let r = update_ratios(&u, t);
                let s = r.as_slice();
                s.iter().copied().fold(f64::MIN, f64::max) - s.iter().copied().fold(f64::MAX, f64::min)
            })
            .collect();
        monotone &= spread.windows(2).all(|w| w[1] < w[0]);
    }
    verdict(
        worst <= 1e-12 && monotone,
        format!("max |sum - (K-1)| {worst:.1e} over 3000 draws; disparity strictly decreasing in tau: {monotone}"),
        started,
    )
}

/// Toy rebalancing regime. Modality 0 is dominant (s = 8) but, being one
/// dimensional, can separate only two pairs of the four classes, so the
/// joint model has headroom that the weak 16-dimensional modality must
/// supply. Optimizer settings are the usual SGD defaults: lr 0.01,
/// momentum 0.9, weight decay 1e-4, tau 0.25.
fn rebalance_config(seed: u64, strategy: Strategy) -> RunConfig {
    RunConfig {
        data: DataSource::Generate(DataSpec {
            modalities: 2,
            classes: 4,
            dims: vec![1, 16],
            snr: vec![8.0, 1.0],
            train: 2000,
            val: 500,
            test: 1000,
            seed: amss_core::config::derive_seed(seed, 1),
        }),
        model: ModelConfig {
            widths: vec![64, 32],
            overrides: Vec::new(),
            fusion: Fusion::Concat,
        },
        strategy,
        tau: 0.25,
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: 16,
        epochs: 40,
        seed,
        ..RunConfig::default()
    }
}

fn data_for(cfg: &RunConfig) -> Dataset {
    match &cfg.data {
        DataSource::Generate(spec) => generate(spec).unwrap(),
        DataSource::File(_) => unreachable!(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct SeedRuns {
    baseline: RunOutcome,
    plus: RunOutcome,
    amss: RunOutcome,
    grid_ok: bool,
    grid_best: (f64, f64),
}

const SEEDS: u64 = 5;
const GRID: [f64; 3] = [0.2, 0.6, 1.0];

fn train_seed(seed: u64) -> SeedRuns {
    let base_cfg = rebalance_config(seed, Strategy::Baseline);
    let data = data_for(&base_cfg);
    let baseline = run_on_dataset(&base_cfg, &data).unwrap();
    let plus = run_on_dataset(&rebalance_config(seed, Strategy::AmssPlus), &data).unwrap();
    let amss = run_on_dataset(&rebalance_config(seed, Strategy::Amss), &data).unwrap();
    let grid_cfg = rebalance_config(seed, Strategy::UniformMask(vec![1.0, 1.0]));
    let grid = grid_sweep_on(&grid_cfg, &data, &GRID, &GRID).unwrap();
    // Every cell tied for best must respect the ordering.
    let best = grid.accuracy.iter().flatten().copied().fold(f64::MIN, f64::max);
    let mut grid_ok = true;
    let mut grid_best = (0.0, 0.0);
    for (i, row) in grid.accuracy.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a == best {
                grid_ok &= GRID[i] <= GRID[j];
                grid_best = (GRID[i], GRID[j]);
            }
        }
    }
    SeedRuns {
        baseline,
        plus,
        amss,
        grid_ok,
        grid_best,
    }
}

fn final_accuracy(o: &RunOutcome) -> f64 {
    o.final_test.accuracy
}

fn weak_branch(o: &RunOutcome) -> f64 {
    o.final_test.branch_accuracy[1]
}

// 6. Joint and weak-branch gains, and the grid ordering.
fn rebalancing(runs: &[SeedRuns], elapsed: Duration) -> Verdict {
    let started = Instant::now();
    let acc_base = median(runs.iter().map(|r| final_accuracy(&r.baseline)).collect());
    let acc_plus = median(runs.iter().map(|r| final_accuracy(&r.plus)).collect());
    let weak_base = median(runs.iter().map(|r| weak_branch(&r.baseline)).collect());
    let weak_plus = median(runs.iter().map(|r| weak_branch(&r.plus)).collect());
    let grid_hits = runs.iter().filter(|r| r.grid_ok).count();
    let a = acc_plus - acc_base >= 0.02;
    let b = weak_plus - weak_base >= 0.05;
    let c = grid_hits >= 3;
    let best: Vec<String> = runs.iter().map(|r| format!("({}, {})", r.grid_best.0, r.grid_best.1)).collect();
    Verdict {
        passed: a && b && c && elapsed < Duration::from_secs(15 * 60),
        detail: format!(
            "(a) median accuracy {acc_plus:.3} vs baseline {acc_base:.3} [{}]; (b) weak branch {weak_plus:.3} vs {weak_base:.3} [{}]; \
             (c) best grid cells {} satisfy rho_dom <= rho_weak in {grid_hits}/5 [{}]; {:.0}s",
            if a { "ok" } else { "short" },
            if b { "ok" } else { "short" },
            best.join(" "),
            if c { "ok" } else { "short" },
            elapsed.as_secs_f64()
        ),
        elapsed: started.elapsed() + elapsed,
    }
}

// 7. AMSS learns more slowly early on.
fn pacing(runs: &[SeedRuns]) -> Verdict {
    let started = Instant::now();
    let mut hits = 0;
    let mut notes = Vec::new();
    for r in runs {
        let base: Vec<f64> = r.baseline.metrics.iter().map(|m| m.train_loss).collect();
        let amss: Vec<f64> = r.amss.metrics.iter().map(|m| m.train_loss).collect();
        let target = base[0] - 0.5 * (base[0] - base[base.len() - 1]);
        let e = base.iter().position(|&l| l <= target).unwrap();
        hits += usize::from(amss[e] >= base[e]);
        notes.push(format!("epoch {}: {:.3} vs {:.3}", e + 1, amss[e], base[e]));
    }
    verdict(hits >= 3, format!("AMSS loss not below baseline in {hits}/5 seeds ({})", notes.join(", ")), started)
}

// 8. AMSS+ narrows the significance gap.
fn imbalance(runs: &[SeedRuns]) -> Verdict {
    let started = Instant::now();
    let late = |o: &RunOutcome| {
        let rows = &o.metrics[o.metrics.len() - 5..];
        rows.iter().map(|m| m.imbalance).sum::<f64>() / 5.0
    };
    let mut hits = 0;
    let mut notes = Vec::new();
    for r in runs {
        let (b, p) = (late(&r.baseline), late(&r.plus));
        hits += usize::from(p.ln().abs() < b.ln().abs());
        notes.push(format!("{p:.2} vs {b:.2}"));
    }
    verdict(hits >= 4, format!("AMSS+ closer to 1 in {hits}/5 seeds ({})", notes.join(", ")), started)
}

// 9. Byte-identical reruns and exact checkpoint round trip.
fn determinism() -> Verdict {
    let started = Instant::now();
    let mut cfg = rebalance_config(7, Strategy::AmssPlus);
    cfg.epochs = 5;
    let data = data_for(&cfg);
    let a = run_on_dataset(&cfg, &data).unwrap();
    let b = run_on_dataset(&cfg, &data).unwrap();
    let same_csv = metrics_csv(&a.metrics) == metrics_csv(&b.metrics);

    let dir = tempfile::tempdir().unwrap();
    write_run(&a, &dir.path().join("a")).unwrap();
    write_run(&b, &dir.path().join("b")).unwrap();
    let read = |run: &str, f: &str| std::fs::read(dir.path().join(run).join(f)).unwrap();
    let same_files = read("a", "metrics.csv") == read("b", "metrics.csv") && read("a", "checkpoint.bin") == read("b", "checkpoint.bin");

    let saved = checkpoint::load(&dir.path().join("a/checkpoint.bin")).unwrap();
    let mut restored = b.model.clone();
    for id in restored.params().ids().collect::<Vec<_>>() {
        restored.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    checkpoint::restore_into(restored.params_mut(), &saved).unwrap();
    let bits = |m: &amss_core::model::MultiModalModel| -> Vec<u64> {
        let p = m.params();
        p.ids().flat_map(|id| p.get(id).data().iter().map(|v| v.to_bits())).collect()
    };
    let exact = bits(&restored) == bits(&a.model);
    verdict(
        same_csv && same_files && exact,
        format!("metrics identical: {same_csv}; run files identical: {same_files}; checkpoint restores bit-exact: {exact}"),
        started,
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, Verdict)> = vec![
        (1, gradient_correctness()),
        (2, unbiasedness()),
        (3, bias_quantification()),
        (4, sampling_correctness()),
        (5, ratio_algebra()),
    ];
    let t = Instant::now();
    let runs: Vec<SeedRuns> = (0..SEEDS).map(train_seed).collect();
    let training = t.elapsed();
    results.push((6, rebalancing(&runs, training)));
    results.push((7, pacing(&runs)));
    results.push((8, imbalance(&runs)));
    results.push((9, determinism()));

    for (n, v) in &results {
        println!(
            "criterion {n}: {} | {} | {:.1}s",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            v.elapsed.as_secs_f64()
        );
    }
    let failed: Vec<u32> = results.iter().filter(|(_, v)| !v.passed).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
