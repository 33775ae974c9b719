//! The training loop and run artifacts.
//!
//! Each iteration runs the joint forward and backward pass, one unimodal
//! pass per modality for significance (and, for the adaptive strategies,
//! Fisher importance), then a single optimizer step shaped by the strategy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{DataSource, RunConfig, Strategy};
use crate::data::{generate, load_dataset, Dataset, LabeledBatch};
use crate::error::{AmssError, Result};
use crate::mask::{
    fisher_dump, importance_from_signals, sample_plan, scope_is_empty, selection_count, uniform_mask_plan,
    MaskPlan, UnitImportance,
};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{build_model, Head, MultiModalModel};
use crate::optim::{PlateauScheduler, Sgd};
use crate::plot;
use crate::significance::{imbalance_degree, modality_significance, SignificanceState};

/// One row of `significance.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub u_hat: Vec<f64>,
    pub u: Vec<f64>,
    /// Ratios implied by `u`, whether or not the strategy applies them.
    pub rho: Vec<f64>,
    pub imbalance: f64,
}

/// One row of `selections.csv`: realized against expected unit counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionRecord {
    pub iteration: usize,
    pub modality: usize,
    pub layer: String,
    pub units: usize,
    pub selected: usize,
    pub expected: usize,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub strategy: String,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    /// Test accuracy of each unimodal branch.
    pub branch_accuracy: Vec<f64>,
    /// Epoch means of the per-iteration estimates.
    pub u_hat: Vec<f64>,
    pub u: Vec<f64>,
    /// Mean ratio of units actually updated per modality (1 when unmasked).
    pub rho: Vec<f64>,
    /// Epoch mean of `u_1 / u_2`.
    pub imbalance: f64,
}

#[derive(Clone, Debug)]
pub struct FisherDump {
    pub epoch: usize,
    pub modality: usize,
    pub csv: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub metrics: Vec<MetricsRow>,
    pub iterations: Vec<IterationRecord>,
    pub selections: Vec<SelectionRecord>,
    pub fisher_dumps: Vec<FisherDump>,
    pub final_test: Evaluation,
    pub model: MultiModalModel,
}

impl RunOutcome {
    /// Mean significance ratio per modality over iterations of epochs
    /// `1..=epochs`.
    pub fn mean_ratio(&self, epochs: usize) -> Vec<f64> {
        let rows: Vec<&IterationRecord> = self.iterations.iter().filter(|r| r.epoch <= epochs).collect();
        let k = rows.first().map_or(0, |r| r.rho.len());
        (0..k)
            .map(|m| rows.iter().map(|r| r.rho[m]).sum::<f64>() / rows.len() as f64)
            .collect()
    }
}

pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Generate(spec) => generate(spec),
        DataSource::File(p) => load_dataset(&crate::config::resolve_output(p)),
    }
}

pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    let data = load_data(config)?;
    run_on_dataset(config, &data)
}

fn ctx(epoch: usize, batch: usize, modality: Option<usize>) -> impl Fn(AmssError) -> AmssError {
    move |e| AmssError::Training {
        epoch,
        batch,
        modality,
        source: Box::new(e),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, |r| r.len());
    (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

/// Trains on a prepared dataset; everything random derives from the
/// config's seeds.
pub fn run_on_dataset(config: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let kk = data.spec.modalities;
    let spec = config.model.to_spec(&data.spec.dims, data.spec.classes)?;
    if let Strategy::GlobalWise(v) | Strategy::UniformMask(v) = &config.strategy {
        if v.len() != kk {
            return Err(AmssError::Config(format!(
                "{} lists {} coefficients for {kk} modalities",
                config.strategy.name(),
                v.len()
            )));
        }
    }
    let mut model = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(config.init_seed()))?;
    let mut sampling_rng = ChaCha8Rng::seed_from_u64(config.sampling_seed());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed());
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay)?;
    let mut scheduler = config.plateau_patience.map(PlateauScheduler::new);
    let mut significance = SignificanceState::new(kk, config.lambda, config.tau)?;

    let masks_units = matches!(config.strategy, Strategy::UniformMask(_)) || config.strategy.adaptive_mode().is_some();
    if masks_units {
        for k in 0..kk {
            if scope_is_empty(&model, k, config.scope) {
                warn!(
                    "mask scope `{}` holds no layers for modality {k} under {} fusion; its parameters train unmasked",
                    config.scope.as_str(),
                    spec.fusion.as_str()
                );
            }
        }
    }

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iteration = 0usize;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut iterations = Vec::new();
    let mut selections = Vec::new();
    let mut fisher_dumps = Vec::new();
    let mut importance: Vec<Option<UnitImportance>> = vec![None; kk];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut epoch_u_hat = Vec::new();
        let mut epoch_u = Vec::new();
        let mut epoch_rho = Vec::new();
        let mut epoch_imbalance = Vec::new();
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let last_batch = batches.len() - 1;
        for (b, idx) in batches.into_iter().enumerate() {
            iteration += 1;
            let at = |m| ctx(epoch, b, m);
            let batch: LabeledBatch = data.train.select(idx).map_err(at(None))?;
            let (loss, cache) = model.forward(&batch).map_err(at(None))?;
            if !loss.is_finite() {
                return Err(at(None)(AmssError::InvalidInput(format!("training loss became {loss}"))));
            }
            loss_sum += loss * batch.len() as f64;
            let grads = model.backward(cache).map_err(at(None))?;

            let refresh = (iteration - 1) % config.fisher_stride == 0;
            let adaptive = config.strategy.adaptive_mode();
            let mut u_hat = Vec::with_capacity(kk);
            for k in 0..kk {
                let (_, ucache) = model.forward_head(&batch, Head::Unimodal(k)).map_err(at(Some(k)))?;
                u_hat.push(
                    modality_significance(ucache.probs(), &batch.labels)
                        .map_err(at(Some(k)))?
                        .rate,
                );
                if adaptive.is_some() && (refresh || importance[k].is_none()) {
                    let signals = model.backward_signals(ucache).map_err(at(Some(k)))?;
                    importance[k] =
                        Some(importance_from_signals(&model, &signals, k, config.scope).map_err(at(Some(k)))?);
                }
            }
            significance.update(&u_hat).map_err(at(None))?;
            let ratios = significance.ratios();
            let imbalance = imbalance_degree(significance.u()[0], significance.u()[1]);

            let mut applied = vec![1.0; kk];
            let plans: Vec<MaskPlan> = match &config.strategy {
                Strategy::Baseline | Strategy::GlobalWise(_) => Vec::new(),
                Strategy::UniformMask(rho) => (0..kk)
                    .map(|k| {
                        applied[k] = rho[k];
                        uniform_mask_plan(&model, k, rho[k], config.scope, &mut sampling_rng).map_err(at(Some(k)))
                    })
                    .collect::<Result<_>>()?,
                _ => {
                    let mode = adaptive.expect("adaptive strategy");
                    (0..kk)
                        .map(|k| {
                            applied[k] = ratios.get(k);
                            let imp = importance[k].as_ref().expect("computed above");
                            sample_plan(imp, ratios.get(k), mode, &mut sampling_rng).map_err(at(Some(k)))
                        })
                        .collect::<Result<_>>()?
                }
            };
            for plan in &plans {
                for l in &plan.layers {
                    selections.push(SelectionRecord {
                        iteration,
                        modality: plan.modality,
                        layer: model.layer(l.layer).name.clone(),
                        units: l.units(),
                        selected: l.selected.len(),
                        expected: selection_count(plan.ratio, l.units()),
                    });
                }
            }
            if config.fisher_dump && b == last_batch && adaptive.is_some() {
                for plan in &plans {
                    let imp = importance[plan.modality].as_ref().expect("adaptive");
                    fisher_dumps.push(FisherDump {
                        epoch,
                        modality: plan.modality,
                        csv: fisher_dump(&model, imp, plan),
                    });
                }
            }

            match &config.strategy {
                Strategy::Baseline => opt.sgd_step(model.params_mut(), &grads),
                Strategy::GlobalWise(v) => opt.global_scaled_step(model.params_mut(), &grads, v),
                _ => opt.step_with_plans(model.params_mut(), &grads, &plans),
            }
            .map_err(at(None))?;

            epoch_u_hat.push(u_hat.clone());
            epoch_u.push(significance.u().to_vec());
            epoch_rho.push(applied);
            epoch_imbalance.push(imbalance);
            iterations.push(IterationRecord {
                iteration,
                epoch,
                u_hat,
                u: significance.u().to_vec(),
                rho: ratios.as_slice().to_vec(),
                imbalance,
            });
        }

        let train_loss = loss_sum / n as f64;
        let val = evaluate(&model, &data.val).map_err(ctx(epoch, 0, None))?;
        let test = evaluate(&model, &data.test).map_err(ctx(epoch, 0, None))?;
        metrics.push(MetricsRow {
            epoch,
            strategy: config.strategy.name().to_string(),
            lr: opt.lr,
            train_loss,
            val_accuracy: val.accuracy,
            test_accuracy: test.accuracy,
            test_macro_f1: test.macro_f1,
            branch_accuracy: test.branch_accuracy.clone(),
            u_hat: column_means(&epoch_u_hat),
            u: column_means(&epoch_u),
            rho: column_means(&epoch_rho),
            imbalance: mean(&epoch_imbalance),
        });
        info!(
            "epoch {epoch}: loss {train_loss:.4}, val {:.4}, test {:.4}, branches {:?}",
            val.accuracy, test.accuracy, test.branch_accuracy
        );
        if let Some(s) = scheduler.as_mut() {
            if let Some(lr) = s.observe(train_loss, &mut opt) {
                info!("loss plateaued; learning rate now {lr}");
            }
        }
    }

    let final_test = evaluate(&model, &data.test)?;
    Ok(RunOutcome {
        config: config.clone(),
        metrics,
        iterations,
        selections,
        fisher_dumps,
        final_test,
        model,
    })
}

fn push_list(s: &mut String, xs: &[f64]) {
    for x in xs {
        let _ = write!(s, ",{x}");
    }
}

fn indexed(prefix: &str, k: usize) -> String {
    (0..k).map(|i| format!(",{prefix}_{i}")).collect()
}

/// `metrics.csv` columns, for `k` modalities.
pub fn metrics_header(k: usize) -> String {
    format!(
        "epoch,strategy,lr,train_loss,val_accuracy,test_accuracy,test_macro_f1{}{}{}{},imbalance",
        indexed("branch_accuracy", k),
        indexed("u_hat", k),
        indexed("u", k),
        indexed("rho", k),
    )
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let k = rows.first().map_or(0, |r| r.branch_accuracy.len());
    let mut s = metrics_header(k);
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.strategy, r.lr, r.train_loss, r.val_accuracy, r.test_accuracy, r.test_macro_f1
        );
        push_list(&mut s, &r.branch_accuracy);
        push_list(&mut s, &r.u_hat);
        push_list(&mut s, &r.u);
        push_list(&mut s, &r.rho);
        let _ = writeln!(s, ",{}", r.imbalance);
    }
    s
}

pub fn significance_csv(rows: &[IterationRecord]) -> String {
    let k = rows.first().map_or(0, |r| r.u.len());
    let mut s = format!(
        "iteration,epoch{}{}{},imbalance\n",
        indexed("u_hat", k),
        indexed("u", k),
        indexed("rho", k)
    );
    for r in rows {
        let _ = write!(s, "{},{}", r.iteration, r.epoch);
        push_list(&mut s, &r.u_hat);
        push_list(&mut s, &r.u);
        push_list(&mut s, &r.rho);
        let _ = writeln!(s, ",{}", r.imbalance);
    }
    s
}

pub fn selections_csv(rows: &[SelectionRecord]) -> String {
    let mut s = String::from("iteration,modality,layer,units,selected,expected\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration, r.modality, r.layer, r.units, r.selected, r.expected
        );
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    strategy: &'a str,
    seed: u64,
    epochs: usize,
    parameters: usize,
    test_accuracy: f64,
    test_macro_f1: f64,
    branch_accuracy: &'a [f64],
    best_val_accuracy: f64,
    final_train_loss: f64,
    final_imbalance: f64,
}

pub fn summary_json(outcome: &RunOutcome) -> Result<String> {
    let last = outcome.metrics.last();
    let s = Summary {
        strategy: outcome.config.strategy.name(),
        seed: outcome.config.seed,
        epochs: outcome.metrics.len(),
        parameters: outcome.model.params().scalar_count(),
        test_accuracy: outcome.final_test.accuracy,
        test_macro_f1: outcome.final_test.macro_f1,
        branch_accuracy: &outcome.final_test.branch_accuracy,
        best_val_accuracy: outcome.metrics.iter().map(|m| m.val_accuracy).fold(0.0, f64::max),
        final_train_loss: last.map_or(f64::NAN, |m| m.train_loss),
        final_imbalance: last.map_or(f64::NAN, |m| m.imbalance),
    };
    Ok(serde_json::to_string_pretty(&s)? + "\n")
}

/// Writes every artifact of a run into `dir`, creating it if needed.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), outcome.config.to_text())?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    fs::write(dir.join("significance.csv"), significance_csv(&outcome.iterations))?;
    fs::write(dir.join("selections.csv"), selections_csv(&outcome.selections))?;
    fs::write(dir.join("summary.json"), summary_json(outcome)?)?;
    checkpoint::save(outcome.model.params(), &dir.join("checkpoint.bin"))?;
    for d in &outcome.fisher_dumps {
        fs::write(dir.join(format!("fisher_e{}_m{}.csv", d.epoch, d.modality)), &d.csv)?;
    }
    plot::emit_plots(&[dir.to_path_buf()], dir)?;
    Ok(())
}
