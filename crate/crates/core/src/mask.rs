//! Mask units, Fisher importance and per-step mask plans.
//!
//! A mask unit is one output neuron of a linear layer: its weight row plus
//! its bias entry. Units are grouped by layer, and each layer of a
//! modality's subnetwork is sampled independently.

use std::fmt::Write as _;

use rand::Rng;

use crate::data::LabeledBatch;
use crate::error::{AmssError, Result};
use crate::model::{Head, LayerSignals, MultiModalModel};
use crate::params::{LayerId, Owner, ParamId, ParamStore};
use crate::sampling::{
    estimate_inclusion_probabilities, inclusion_probabilities, sample_units, MAX_EXACT_UNITS,
};
use crate::tensor::Tensor;

/// Draws used to estimate inclusion probabilities of layers wider than
/// [`MAX_EXACT_UNITS`].
pub const INCLUSION_DRAWS: usize = 2000;

/// Which part of a modality's network may be masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskScope {
    /// Encoder layers only.
    Backbone,
    /// The modality's own classifier only (late fusion).
    Classifier,
    #[default]
    Both,
}

impl MaskScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" => Err(AmssError::Config("mask scope is empty".into())),
            "backbone" | "encoder" => Ok(Self::Backbone),
            "classifier" | "head" => Ok(Self::Classifier),
            "both" | "all" => Ok(Self::Both),
            other => Err(AmssError::Config(format!("unknown mask scope {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Classifier => "classifier",
            Self::Both => "both",
        }
    }
}

/// How selected units are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Selected units get 1, the rest 0.
    Amss,
    /// Selected units get `1 / (p_j + L)`.
    AmssPlus,
    /// Selected units get `1 / π_j`, the exact inverse inclusion probability.
    TheoreticalUnbiased,
    /// Uniformly drawn units with 0/1 values; importance is ignored.
    UniformRandom,
    /// Every unit gets 1.
    None,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Amss => "amss",
            Self::AmssPlus => "amss_plus",
            Self::TheoreticalUnbiased => "theoretical_unbiased",
            Self::UniformRandom => "uniform_random",
            Self::None => "none",
        }
    }

    fn uses_importance(self) -> bool {
        matches!(self, Self::Amss | Self::AmssPlus | Self::TheoreticalUnbiased)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskUnit {
    pub layer: LayerId,
    pub unit: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
}

/// Layer ids of modality `k` that fall inside `scope`, in forward order.
///
/// Under concat fusion the joint classifier is shared, so the classifier
/// scope holds nothing.
pub fn scope_layers(model: &MultiModalModel, k: usize, scope: MaskScope) -> Result<Vec<LayerId>> {
    if k >= model.modalities() {
        return Err(AmssError::InvalidInput(format!(
            "modality {k} out of range for {} modalities",
            model.modalities()
        )));
    }
    let mut out = Vec::new();
    if matches!(scope, MaskScope::Backbone | MaskScope::Both) {
        out.extend_from_slice(model.encoder_layers(k));
    }
    if matches!(scope, MaskScope::Classifier | MaskScope::Both) {
        if let Some(id) = model.modality_classifier(k) {
            out.push(id);
        }
    }
    Ok(out)
}

/// Every mask unit of modality `k` within `scope`.
pub fn enumerate_mask_units(model: &MultiModalModel, k: usize, scope: MaskScope) -> Result<Vec<MaskUnit>> {
    let mut units = Vec::new();
    for id in scope_layers(model, k, scope)? {
        let layer = model.layer(id);
        let shape = model.params().get(layer.weight).shape();
        let bias = layer.bias.expect("masked layers are linear");
        for unit in 0..shape[0] {
            units.push(MaskUnit {
                layer: id,
                unit,
                weight: layer.weight,
                bias,
                fan_in: shape[1],
            });
        }
    }
    Ok(units)
}

/// Fisher values and normalised sampling probabilities of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerImportance {
    pub layer: LayerId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fisher: Vec<f64>,
    /// `F_j / Σ F`, or uniform when the whole layer has zero Fisher.
    pub probs: Vec<f64>,
}

impl LayerImportance {
    pub fn units(&self) -> usize {
        self.fisher.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitImportance {
    pub modality: usize,
    pub layers: Vec<LayerImportance>,
}

impl UnitImportance {
    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.units()).sum()
    }
}

fn normalise(fisher: &[f64]) -> Vec<f64> {
    let total: f64 = fisher.iter().sum();
    if total > 0.0 && total.is_finite() {
        fisher.iter().map(|f| f / total).collect()
    } else {
        vec![1.0 / fisher.len() as f64; fisher.len()]
    }
}

/// Empirical Fisher of modality `k`'s units, using the per-sample gradients
/// of `ln q(y_i | x_i^k)` from the unimodal head.
pub fn accumulate_fisher(
    model: &MultiModalModel,
    batch: &LabeledBatch,
    k: usize,
    scope: MaskScope,
) -> Result<UnitImportance> {
    let (_, cache) = model.forward_head(batch, Head::Unimodal(k))?;
    let signals = model.backward_signals(cache)?;
    importance_from_signals(model, &signals, k, scope)
}

/// Fisher importance from per-sample signals of a unimodal pass.
///
/// For a unit with incoming activations `a_i` and output gradient `δ_ij`
/// the per-sample squared gradient norm over its row and bias is
/// `δ_ij² (‖a_i‖² + 1)`; the Fisher value is its batch mean.
pub fn importance_from_signals(
    model: &MultiModalModel,
    signals: &LayerSignals,
    k: usize,
    scope: MaskScope,
) -> Result<UnitImportance> {
    let b = signals.batch_size as f64;
    let mut layers = Vec::new();
    for id in scope_layers(model, k, scope)? {
        let layer = model.layer(id);
        let shape = model.params().get(layer.weight).shape().to_vec();
        let fisher = match signals.linear.get(id.0).and_then(|s| s.as_ref()) {
            Some((delta, input)) => {
                let norms: Vec<f64> = (0..input.shape()[0])
                    .map(|i| input.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0)
                    .collect();
                let mut f = vec![0.0; shape[0]];
                for (i, norm) in norms.iter().enumerate() {
                    for (fj, d) in f.iter_mut().zip(delta.row(i)) {
                        *fj += d * d * norm;
                    }
                }
                f.iter().map(|v| v / b).collect()
            }
            // The unimodal pass never reached this layer.
            None => vec![0.0; shape[0]],
        };
        if fisher.iter().any(|v| !v.is_finite()) {
            return Err(AmssError::NonFiniteGradient {
                param: model.params().name(layer.weight).to_string(),
            });
        }
        layers.push(LayerImportance {
            layer: id,
            weight: layer.weight,
            bias: layer.bias.expect("linear"),
            fan_in: shape[1],
            probs: normalise(&fisher),
            fisher,
        });
    }
    Ok(UnitImportance { modality: k, layers })
}

/// `⌈ρ·L⌉` clamped to `1..=L`, with a small tolerance so that products such
/// as `0.3·10` do not round up past the intended count.
pub fn selection_count(rho: f64, units: usize) -> usize {
    let n = (rho * units as f64 - 1e-9).ceil();
    (n.max(1.0) as usize).min(units)
}

/// One layer's selection and per-unit mask values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub layer: LayerId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub selected: Vec<usize>,
    /// Mask value of every unit; zero for units not selected.
    pub unit_values: Vec<f64>,
}

impl LayerMask {
    pub fn units(&self) -> usize {
        self.unit_values.len()
    }
}

/// The masks applied to one modality's subnetwork for a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub modality: usize,
    pub mode: MaskMode,
    pub ratio: f64,
    pub layers: Vec<LayerMask>,
}

impl MaskPlan {
    /// Per-parameter mask tensors shaped like the weights and biases.
    pub fn param_masks(&self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let mut w = Vec::with_capacity(l.units() * l.fan_in);
            for &v in &l.unit_values {
                w.extend(std::iter::repeat_n(v, l.fan_in));
            }
            out.push((
                l.weight,
                Tensor::matrix(l.units(), l.fan_in, w).expect("sizes agree"),
            ));
            out.push((l.bias, Tensor::vector(l.unit_values.clone()).expect("non-empty")));
        }
        out
    }

    /// Checks that the plan belongs to modality `k`'s parameters and that
    /// its shapes agree with the store.
    pub fn check_against(&self, params: &ParamStore) -> Result<()> {
        for l in &self.layers {
            for id in [l.weight, l.bias] {
                if id.0 >= params.len() {
                    return Err(AmssError::PlanMismatch(format!("parameter {} does not exist", id.0)));
                }
                if params.owner(id) != Owner::Modality(self.modality) {
                    return Err(AmssError::PlanMismatch(format!(
                        "{} is not owned by modality {}",
                        params.name(id),
                        self.modality
                    )));
                }
            }
            let ws = params.get(l.weight).shape();
            if ws != [l.units(), l.fan_in] || params.get(l.bias).shape() != [l.units()] {
                return Err(AmssError::PlanMismatch(format!(
                    "{} has shape {:?}, plan expects [{}, {}]",
                    params.name(l.weight),
                    ws,
                    l.units(),
                    l.fan_in
                )));
            }
        }
        Ok(())
    }

    pub fn selected_units(&self) -> usize {
        self.layers.iter().map(|l| l.selected.len()).sum()
    }
}

fn check_selection(selected: &[usize], units: usize, expected: usize, layer: LayerId) -> Result<()> {
    if selected.len() != expected {
        return Err(AmssError::Sampling(format!(
            "layer {} selected {} units, expected {expected}",
            layer.0,
            selected.len()
        )));
    }
    let mut seen = vec![false; units];
    for &j in selected {
        if j >= units || seen[j] {
            return Err(AmssError::Sampling(format!(
                "layer {} has invalid or repeated unit {j}",
                layer.0
            )));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Mask plan from an explicit selection. `selected[l]` lists the chosen
/// units of `importance.layers[l]`; each list must hold exactly
/// [`selection_count`] distinct units for `ratio`.
///
/// Inverse inclusion probabilities are enumerated exactly, so
/// [`MaskMode::TheoreticalUnbiased`] fails on layers wider than
/// [`MAX_EXACT_UNITS`]; use [`build_mask_with_inclusion`] there.
pub fn build_mask(
    selected: &[Vec<usize>],
    importance: &UnitImportance,
    ratio: f64,
    mode: MaskMode,
) -> Result<MaskPlan> {
    let inclusion = if mode == MaskMode::TheoreticalUnbiased {
        Some(
            importance
                .layers
                .iter()
                .map(|l| inclusion_probabilities(&l.probs, selection_count(ratio, l.units())))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    assemble(selected, importance, ratio, mode, inclusion.as_deref())
}

/// [`MaskMode::TheoreticalUnbiased`] plan with caller-supplied inclusion
/// probabilities, one vector per layer.
pub fn build_mask_with_inclusion(
    selected: &[Vec<usize>],
    importance: &UnitImportance,
    ratio: f64,
    inclusion: &[Vec<f64>],
) -> Result<MaskPlan> {
    assemble(selected, importance, ratio, MaskMode::TheoreticalUnbiased, Some(inclusion))
}

fn assemble(
    selected: &[Vec<usize>],
    importance: &UnitImportance,
    ratio: f64,
    mode: MaskMode,
    inclusion: Option<&[Vec<f64>]>,
) -> Result<MaskPlan> {
    if !mode.uses_importance() {
        return Err(AmssError::InvalidInput(format!(
            "mode {} does not build masks from importance",
            mode.as_str()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AmssError::InvalidInput(format!("ratio {ratio} outside (0, 1]")));
    }
    if selected.len() != importance.layers.len() {
        return Err(AmssError::InvalidInput(format!(
            "{} selections for {} layers",
            selected.len(),
            importance.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(selected.len());
    for (li, (sel, imp)) in selected.iter().zip(&importance.layers).enumerate() {
        let units = imp.units();
        check_selection(sel, units, selection_count(ratio, units), imp.layer)?;
        let mut values = vec![0.0; units];
        for &j in sel {
            values[j] = match mode {
                MaskMode::Amss => 1.0,
                MaskMode::AmssPlus => 1.0 / (imp.probs[j] + units as f64),
                MaskMode::TheoreticalUnbiased => {
                    let pi = inclusion.expect("provided")[li]
                        .get(j)
                        .copied()
                        .ok_or_else(|| AmssError::InvalidInput("inclusion vector too short".into()))?;
                    if !(pi > 0.0) {
                        return Err(AmssError::Sampling(format!(
                            "selected unit {j} has inclusion probability {pi}"
                        )));
                    }
                    1.0 / pi
                }
                _ => unreachable!("checked above"),
            };
        }
        layers.push(LayerMask {
            layer: imp.layer,
            weight: imp.weight,
            bias: imp.bias,
            fan_in: imp.fan_in,
            selected: sel.clone(),
            unit_values: values,
        });
    }
    Ok(MaskPlan {
        modality: importance.modality,
        mode,
        ratio,
        layers,
    })
}

/// Samples a plan: per layer, `⌈ρ·L⌉` units drawn by importance, then
/// weighted by `mode`. Layers too wide for exact enumeration use a Monte
/// Carlo inclusion estimate drawn from the same generator.
pub fn sample_plan<R: Rng + ?Sized>(
    importance: &UnitImportance,
    ratio: f64,
    mode: MaskMode,
    rng: &mut R,
) -> Result<MaskPlan> {
    let mut selected = Vec::with_capacity(importance.layers.len());
    for l in &importance.layers {
        selected.push(sample_units(&l.probs, selection_count(ratio, l.units()), rng)?);
    }
    if mode != MaskMode::TheoreticalUnbiased {
        return assemble(&selected, importance, ratio, mode, None);
    }
    let mut inclusion = Vec::with_capacity(importance.layers.len());
    for l in &importance.layers {
        let n = selection_count(ratio, l.units());
        inclusion.push(if l.units() <= MAX_EXACT_UNITS {
            inclusion_probabilities(&l.probs, n)?
        } else {
            estimate_inclusion_probabilities(&l.probs, n, INCLUSION_DRAWS, rng)?
        });
    }
    assemble(&selected, importance, ratio, mode, Some(&inclusion))
}

/// Uniformly random 0/1 plan keeping `⌈ρ·L⌉` units per layer.
pub fn uniform_mask_plan<R: Rng + ?Sized>(
    model: &MultiModalModel,
    k: usize,
    ratio: f64,
    scope: MaskScope,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(AmssError::InvalidInput(format!("ratio {ratio} outside (0, 1]")));
    }
    let mut layers = Vec::new();
    for id in scope_layers(model, k, scope)? {
        let layer = model.layer(id);
        let shape = model.params().get(layer.weight).shape();
        let units = shape[0];
        let n = selection_count(ratio, units);
        let mut selected = rand::seq::index::sample(rng, units, n).into_vec();
        selected.sort_unstable();
        let mut values = vec![0.0; units];
        for &j in &selected {
            values[j] = 1.0;
        }
        layers.push(LayerMask {
            layer: id,
            weight: layer.weight,
            bias: layer.bias.expect("linear"),
            fan_in: shape[1],
            selected,
            unit_values: values,
        });
    }
    Ok(MaskPlan {
        modality: k,
        mode: MaskMode::UniformRandom,
        ratio,
        layers,
    })
}

/// All-ones plan over modality `k`'s scope.
pub fn full_plan(model: &MultiModalModel, k: usize, scope: MaskScope) -> Result<MaskPlan> {
    let mut layers = Vec::new();
    for id in scope_layers(model, k, scope)? {
        let layer = model.layer(id);
        let shape = model.params().get(layer.weight).shape();
        layers.push(LayerMask {
            layer: id,
            weight: layer.weight,
            bias: layer.bias.expect("linear"),
            fan_in: shape[1],
            selected: (0..shape[0]).collect(),
            unit_values: vec![1.0; shape[0]],
        });
    }
    Ok(MaskPlan {
        modality: k,
        mode: MaskMode::None,
        ratio: 1.0,
        layers,
    })
}

/// Whether any layer in `scope` exists for modality `k`; concat fusion has
/// no per-modality classifier.
pub fn scope_is_empty(model: &MultiModalModel, k: usize, scope: MaskScope) -> bool {
    scope_layers(model, k, scope).map(|l| l.is_empty()).unwrap_or(true)
}

/// CSV dump of one modality's importance and the plan drawn from it:
/// `layer,unit,fisher,prob,selected,mask`.
pub fn fisher_dump(model: &MultiModalModel, importance: &UnitImportance, plan: &MaskPlan) -> String {
    let mut out = String::from("layer,unit,fisher,prob,selected,mask\n");
    for (imp, lm) in importance.layers.iter().zip(&plan.layers) {
        let name = &model.layer(imp.layer).name;
        for j in 0..imp.units() {
            let sel = lm.selected.binary_search(&j).is_ok();
            let _ = writeln!(
                out,
                "{name},{j},{},{},{},{}",
                imp.fisher[j], imp.probs[j], sel as u8, lm.unit_values[j]
            );
        }
    }
    out
}
