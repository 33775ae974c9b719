//! Multi-modal MLP networks: per-modality encoders, a fusion head, and the
//! per-modality prediction paths used for significance and Fisher estimates.
//!
//! Gradients are produced by hand-written backprop over a fixed layer set
//! (linear, ReLU, softmax cross-entropy, concat, mean and softmax-weighted
//! mixtures of probability vectors). Backward also exposes per-sample row
//! signals for every linear layer so per-sample quantities (empirical Fisher)
//! come out of one batched pass.

use rand::Rng;

use crate::data::LabeledBatch;
use crate::error::{AmssError, Result};
use crate::params::{GradientSet, LayerId, Owner, ParamId, ParamStore};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Feature concatenation followed by one joint classifier.
    Concat,
    /// Mean of per-modality probability vectors.
    Sum,
    /// Softmax-weighted mixture of per-modality probability vectors with
    /// learned weight logits.
    Weight,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            "weight" => Ok(Fusion::Weight),
            other => Err(AmssError::ModelSpec(format!(
                "unknown fusion `{other}` (expected concat, sum or weight)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
            Fusion::Weight => "weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dims: Vec<usize>,
    /// Hidden widths of each modality's encoder; the last entry is the
    /// feature width at the fusion boundary.
    pub encoder_widths: Vec<Vec<usize>>,
    pub fusion: Fusion,
    pub classes: usize,
}

impl ModelSpec {
    /// Same encoder widths for every modality.
    pub fn uniform(input_dims: Vec<usize>, widths: Vec<usize>, fusion: Fusion, classes: usize) -> Self {
        let encoder_widths = vec![widths; input_dims.len()];
        Self {
            input_dims,
            encoder_widths,
            fusion,
            classes,
        }
    }

    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// Per-modality classifiers exist iff fusion happens on predictions.
    pub fn late_fusion(&self) -> bool {
        matches!(self.fusion, Fusion::Sum | Fusion::Weight)
    }

    pub fn feature_width(&self, k: usize) -> usize {
        *self.encoder_widths[k].last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmssError::ModelSpec(m));
        if self.modalities() < 2 {
            return bad(format!("need at least 2 modalities, got {}", self.modalities()));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.encoder_widths.len() != self.modalities() {
            return bad(format!(
                "{} encoder width lists for {} modalities",
                self.encoder_widths.len(),
                self.modalities()
            ));
        }
        if self.input_dims.contains(&0) {
            return bad("input dimensions must be >= 1".into());
        }
        for (k, w) in self.encoder_widths.iter().enumerate() {
            if w.is_empty() {
                return bad(format!("modality {k} encoder needs at least one layer"));
            }
            if w.contains(&0) {
                return bad(format!("modality {k} encoder has a zero-width layer"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Encoder { modality: usize, depth: usize },
    ModalityClassifier { modality: usize },
    JointClassifier,
    FusionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: LayerId,
    pub name: String,
    pub role: LayerRole,
    /// `out×in` weight for linear layers, the `K` weight logits for
    /// [`LayerRole::FusionWeights`].
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Layer {
    pub fn is_linear(&self) -> bool {
        self.bias.is_some()
    }
}

/// Which prediction a forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Joint,
    /// Prediction from modality `k` alone: its own classifier under late
    /// fusion, the joint classifier with every other modality's features
    /// zeroed under concat fusion.
    Unimodal(usize),
}

#[derive(Clone, Debug)]
pub struct MultiModalModel {
    spec: ModelSpec,
    params: ParamStore,
    layers: Vec<Layer>,
    encoders: Vec<Vec<LayerId>>,
    modality_classifiers: Vec<LayerId>,
    joint_classifier: Option<LayerId>,
    fusion_weights: Option<LayerId>,
}

/// Uniform(−s, s) with `s = sqrt(6 / (fan_in + fan_out))`, zero bias.
fn init_linear<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-s..s))
        .collect();
    (
        Tensor::matrix(fan_out, fan_in, w).expect("sizes agree"),
        Tensor::zeros(&[fan_out]),
    )
}

pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<MultiModalModel> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut layers = Vec::new();

    let mut add_linear = |params: &mut ParamStore,
                          layers: &mut Vec<Layer>,
                          name: String,
                          role: LayerRole,
                          owner: Owner,
                          fan_in: usize,
                          fan_out: usize|
     -> Result<LayerId> {
        let id = LayerId(layers.len());
        let (w, b) = init_linear(rng, fan_in, fan_out);
        let weight = params.push(format!("{name}.weight"), w, id, owner)?;
        let bias = params.push(format!("{name}.bias"), b, id, owner)?;
        layers.push(Layer {
            id,
            name,
            role,
            weight,
            bias: Some(bias),
        });
        Ok(id)
    };

    let mut encoders = Vec::with_capacity(spec.modalities());
    for k in 0..spec.modalities() {
        let mut ids = Vec::new();
        let mut fan_in = spec.input_dims[k];
        for (depth, &width) in spec.encoder_widths[k].iter().enumerate() {
            ids.push(add_linear(
                &mut params,
                &mut layers,
                format!("m{k}.enc{depth}"),
                LayerRole::Encoder { modality: k, depth },
                Owner::Modality(k),
                fan_in,
                width,
            )?);
            fan_in = width;
        }
        encoders.push(ids);
    }

    let mut modality_classifiers = Vec::new();
    let mut joint_classifier = None;
    let mut fusion_weights = None;
    match spec.fusion {
        Fusion::Concat => {
            let width: usize = (0..spec.modalities()).map(|k| spec.feature_width(k)).sum();
            joint_classifier = Some(add_linear(
                &mut params,
                &mut layers,
                "joint.cls".into(),
                LayerRole::JointClassifier,
                Owner::Shared,
                width,
                spec.classes,
            )?);
        }
        Fusion::Sum | Fusion::Weight => {
            for k in 0..spec.modalities() {
                modality_classifiers.push(add_linear(
                    &mut params,
                    &mut layers,
                    format!("m{k}.cls"),
                    LayerRole::ModalityClassifier { modality: k },
                    Owner::Modality(k),
                    spec.feature_width(k),
                    spec.classes,
                )?);
            }
            if spec.fusion == Fusion::Weight {
                let id = LayerId(layers.len());
                let logits = params.push(
                    "fusion.logits",
                    Tensor::zeros(&[spec.modalities()]),
                    id,
                    Owner::Shared,
                )?;
                layers.push(Layer {
                    id,
                    name: "fusion".into(),
                    role: LayerRole::FusionWeights,
                    weight: logits,
                    bias: None,
                });
                fusion_weights = Some(id);
            }
        }
    }

    Ok(MultiModalModel {
        spec: spec.clone(),
        params,
        layers,
        encoders,
        modality_classifiers,
        joint_classifier,
        fusion_weights,
    })
}

/// Intermediates of one forward pass. Consumed by [`MultiModalModel::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    head: Head,
    labels: Vec<usize>,
    trace: Trace,
}

impl ForwardCache {
    pub fn head(&self) -> Head {
        self.head
    }

    /// Predicted probabilities, `B×C`.
    pub fn probs(&self) -> &Tensor {
        &self.trace.probs
    }

    /// Per-sample `−ln q(y_i | x_i)`.
    pub fn sample_losses(&self) -> &[f64] {
        &self.trace.losses
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Clone, Debug)]
struct EncoderTrace {
    /// `inputs[l]` feeds layer `l`.
    inputs: Vec<Tensor>,
    preacts: Vec<Tensor>,
    output: Tensor,
}

#[derive(Clone, Debug)]
enum HeadTrace {
    Concat {
        input: Tensor,
        logits: Tensor,
    },
    Mixture {
        branch_probs: Vec<Tensor>,
        weights: Vec<f64>,
    },
    Branch {
        modality: usize,
        logits: Tensor,
    },
}

#[derive(Clone, Debug)]
struct Trace {
    encoders: Vec<Option<EncoderTrace>>,
    head: HeadTrace,
    probs: Tensor,
    losses: Vec<f64>,
}

/// Per-sample backprop signals: for each linear layer, `(δ, a)` where row
/// `i` of `δ` is `∂ℓ_i/∂z` and row `i` of `a` is the layer input.
#[derive(Clone, Debug)]
pub struct LayerSignals {
    pub linear: Vec<Option<(Tensor, Tensor)>>,
    /// Per-sample gradient of the fusion weight logits, `B×K`.
    pub fusion: Option<Tensor>,
    pub batch_size: usize,
}

impl MultiModalModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &Layer {
        &self.layers[id.0]
    }

    pub fn modalities(&self) -> usize {
        self.spec.modalities()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn encoder_layers(&self, k: usize) -> &[LayerId] {
        &self.encoders[k]
    }

    pub fn modality_classifier(&self, k: usize) -> Option<LayerId> {
        self.modality_classifiers.get(k).copied()
    }

    pub fn joint_classifier(&self) -> Option<LayerId> {
        self.joint_classifier
    }

    pub fn fusion_weight_layer(&self) -> Option<LayerId> {
        self.fusion_weights
    }

    /// Parameters owned by modality `k`.
    pub fn partition(&self, k: usize) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.owner(id) == Owner::Modality(k))
            .collect()
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.owner(id) == Owner::Shared)
            .collect()
    }

    /// Normalized fusion weights (uniform for Sum, softmax of logits for Weight).
    pub fn fusion_weights(&self) -> Vec<f64> {
        self.fusion_weights_with(&self.params)
    }

    fn fusion_weights_with(&self, params: &ParamStore) -> Vec<f64> {
        let k = self.modalities();
        match self.fusion_weights {
            Some(id) => {
                let mut w = params.get(self.layer(id).weight).data().to_vec();
                crate::tensor::softmax_in_place(&mut w);
                w
            }
            None => vec![1.0 / k as f64; k],
        }
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(AmssError::InvalidInput("empty batch".into()));
        }
        if batch.modalities() != self.modalities() {
            return Err(AmssError::Shape {
                layer: "input".into(),
                expected: vec![self.modalities()],
                actual: vec![batch.modalities()],
            });
        }
        for (k, f) in batch.features.iter().enumerate() {
            if f.cols() != self.spec.input_dims[k] || f.rows() != batch.len() {
                let first = self.encoders[k][0];
                return Err(AmssError::Shape {
                    layer: self.layer(first).name.clone(),
                    expected: vec![batch.len(), self.spec.input_dims[k]],
                    actual: f.shape().to_vec(),
                });
            }
        }
        if batch.classes() != self.classes() {
            return Err(AmssError::Shape {
                layer: "labels".into(),
                expected: vec![batch.len(), self.classes()],
                actual: batch.labels.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn linear_forward(&self, params: &ParamStore, id: LayerId, x: &Tensor) -> Result<Tensor> {
        let layer = self.layer(id);
        let w = params.get(layer.weight);
        if x.cols() != w.cols() {
            return Err(AmssError::Shape {
                layer: layer.name.clone(),
                expected: vec![x.rows(), w.cols()],
                actual: x.shape().to_vec(),
            });
        }
        let mut z = x.matmul_nt(w)?;
        z.add_row_vector(params.get(layer.bias.expect("linear layer")))?;
        Ok(z)
    }

    fn encode(&self, params: &ParamStore, k: usize, x: &Tensor) -> Result<EncoderTrace> {
        let mut inputs = Vec::with_capacity(self.encoders[k].len());
        let mut preacts = Vec::with_capacity(self.encoders[k].len());
        let mut h = x.clone();
        for &id in &self.encoders[k] {
            let z = self.linear_forward(params, id, &h)?;
            let next = z.relu();
            inputs.push(h);
            preacts.push(z);
            h = next;
        }
        Ok(EncoderTrace {
            inputs,
            preacts,
            output: h,
        })
    }

    fn trace(&self, params: &ParamStore, batch: &LabeledBatch, head: Head) -> Result<Trace> {
        self.check_batch(batch)?;
        let kk = self.modalities();
        if let Head::Unimodal(k) = head {
            if k >= kk {
                return Err(AmssError::InvalidInput(format!(
                    "modality {k} out of range for {kk} modalities"
                )));
            }
        }
        let active = |k: usize| match head {
            Head::Joint => true,
            Head::Unimodal(m) => m == k,
        };
        let mut encoders = Vec::with_capacity(kk);
        for k in 0..kk {
            encoders.push(if active(k) {
                Some(self.encode(params, k, &batch.features[k])?)
            } else {
                None
            });
        }
        let labels = batch.label_indices();
        let b = batch.len();

        let (head_trace, probs, losses) = match (self.spec.fusion, head) {
            (Fusion::Concat, _) => {
                let zeros: Vec<Tensor> = (0..kk)
                    .map(|k| Tensor::zeros(&[b, self.spec.feature_width(k)]))
                    .collect();
                let parts: Vec<&Tensor> = (0..kk)
                    .map(|k| encoders[k].as_ref().map_or(&zeros[k], |e| &e.output))
                    .collect();
                let input = Tensor::concat_cols(&parts)?;
                let logits =
                    self.linear_forward(params, self.joint_classifier.expect("concat"), &input)?;
                let probs = logits.softmax_rows();
                let losses = ce_losses(&logits, &labels);
                (HeadTrace::Concat { input, logits }, probs, losses)
            }
            (_, Head::Unimodal(k)) => {
                let logits = self.linear_forward(
                    params,
                    self.modality_classifiers[k],
                    &encoders[k].as_ref().expect("active").output,
                )?;
                let probs = logits.softmax_rows();
                let losses = ce_losses(&logits, &labels);
                (HeadTrace::Branch { modality: k, logits }, probs, losses)
            }
            (_, Head::Joint) => {
                let weights = self.fusion_weights_with(params);
                let mut branch_logits = Vec::with_capacity(kk);
                let mut branch_probs = Vec::with_capacity(kk);
                for k in 0..kk {
                    let z = self.linear_forward(
                        params,
                        self.modality_classifiers[k],
                        &encoders[k].as_ref().expect("active").output,
                    )?;
                    branch_probs.push(z.softmax_rows());
                    branch_logits.push(z);
                }
                let c = self.classes();
                let mut probs = Tensor::zeros(&[b, c]);
                for (k, q) in branch_probs.iter().enumerate() {
                    probs.axpy(weights[k], q)?;
                }
                let mut losses = Vec::with_capacity(b);
                let mut terms = vec![0.0; kk];
                for (i, &y) in labels.iter().enumerate() {
                    for k in 0..kk {
                        let row = branch_logits[k].row(i);
                        terms[k] = weights[k].ln() + row[y] - log_sum_exp(row);
                    }
                    losses.push(-log_sum_exp(&terms));
                }
                (
                    HeadTrace::Mixture {
                        branch_probs,
                        weights,
                    },
                    probs,
                    losses,
                )
            }
        };

        Ok(Trace {
            encoders,
            head: head_trace,
            probs,
            losses,
        })
    }

    /// Joint forward pass: batch-mean cross-entropy and the cache for backward.
    pub fn forward(&self, batch: &LabeledBatch) -> Result<(f64, ForwardCache)> {
        self.forward_head(batch, Head::Joint)
    }

    pub fn forward_head(&self, batch: &LabeledBatch, head: Head) -> Result<(f64, ForwardCache)> {
        let trace = self.trace(&self.params, batch, head)?;
        let loss = mean(&trace.losses);
        Ok((
            loss,
            ForwardCache {
                version: self.params.version(),
                head,
                labels: batch.label_indices(),
                trace,
            },
        ))
    }

    /// Batch-mean loss evaluated with an arbitrary parameter store of the
    /// same layout (used by finite-difference checks).
    pub fn loss_with_params(&self, params: &ParamStore, batch: &LabeledBatch, head: Head) -> Result<f64> {
        Ok(mean(&self.trace(params, batch, head)?.losses))
    }

    pub fn predict_joint(&self, batch: &LabeledBatch) -> Result<Tensor> {
        Ok(self.trace(&self.params, batch, Head::Joint)?.probs)
    }

    pub fn predict_unimodal(&self, batch: &LabeledBatch, k: usize) -> Result<Tensor> {
        Ok(self.trace(&self.params, batch, Head::Unimodal(k))?.probs)
    }

    /// Gradient of the batch-mean loss with respect to every parameter.
    pub fn backward(&self, cache: ForwardCache) -> Result<GradientSet> {
        let signals = self.backward_signals(cache)?;
        self.gradients_from_signals(&signals)
    }

    pub fn gradients_from_signals(&self, signals: &LayerSignals) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(&self.params);
        let inv_b = 1.0 / signals.batch_size as f64;
        for layer in &self.layers {
            if let Some((delta, input)) = &signals.linear[layer.id.0] {
                *grads.get_mut(layer.weight) = delta.matmul_tn(input)?.scale(inv_b);
                *grads.get_mut(layer.bias.expect("linear")) = delta.sum_rows().scale(inv_b);
            }
        }
        if let (Some(id), Some(g)) = (self.fusion_weights, &signals.fusion) {
            *grads.get_mut(self.layer(id).weight) = g.sum_rows().scale(inv_b);
        }
        Ok(grads)
    }

    /// Per-sample row signals for every linear layer touched by the cached
    /// forward pass.
    pub fn backward_signals(&self, cache: ForwardCache) -> Result<LayerSignals> {
        if cache.version != self.params.version() {
            return Err(AmssError::StaleCache {
                cache: cache.version,
                model: self.params.version(),
            });
        }
        let ForwardCache { labels, trace, .. } = cache;
        let b = labels.len();
        let kk = self.modalities();
        let mut linear: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers.len()];
        let mut fusion = None;
        let mut feature_grads: Vec<Option<Tensor>> = vec![None; kk];

        match trace.head {
            HeadTrace::Concat { input, logits } => {
                let delta = softmax_ce_delta(&logits, &labels);
                let id = self.joint_classifier.expect("concat");
                let d_input = delta.matmul_nn(self.params.get(self.layer(id).weight))?;
                let widths: Vec<usize> = (0..kk).map(|k| self.spec.feature_width(k)).collect();
                for (k, g) in d_input.split_cols(&widths)?.into_iter().enumerate() {
                    if trace.encoders[k].is_some() {
                        feature_grads[k] = Some(g);
                    }
                }
                linear[id.0] = Some((delta, input));
            }
            HeadTrace::Branch { modality, logits } => {
                let delta = softmax_ce_delta(&logits, &labels);
                let id = self.modality_classifiers[modality];
                feature_grads[modality] =
                    Some(delta.matmul_nn(self.params.get(self.layer(id).weight))?);
                let input = trace.encoders[modality].as_ref().expect("active").output.clone();
                linear[id.0] = Some((delta, input));
            }
            HeadTrace::Mixture {
                branch_probs,
                weights,
            } => {
                // r_ik = w_k q_k(y_i) / P(y_i); ∂ℓ_i/∂z_k = r_ik (q_k − e_y);
                // ∂ℓ_i/∂a = w − r_i for the weight logits a.
                let mut resp = Tensor::zeros(&[b, kk]);
                for (i, &y) in labels.iter().enumerate() {
                    let joint: f64 = (0..kk).map(|k| weights[k] * branch_probs[k].get(i, y)).sum();
                    for k in 0..kk {
                        let r = if joint > 0.0 {
                            weights[k] * branch_probs[k].get(i, y) / joint
                        } else {
                            weights[k]
                        };
                        resp.set(i, k, r);
                    }
                }
                for k in 0..kk {
                    let mut delta = branch_probs[k].clone();
                    for (i, &y) in labels.iter().enumerate() {
                        let r = resp.get(i, k);
                        let row = delta.row_mut(i);
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= r;
                        }
                    }
                    let id = self.modality_classifiers[k];
                    feature_grads[k] = Some(delta.matmul_nn(self.params.get(self.layer(id).weight))?);
                    let input = trace.encoders[k].as_ref().expect("active").output.clone();
                    linear[id.0] = Some((delta, input));
                }
                if self.fusion_weights.is_some() {
                    let mut g = Tensor::zeros(&[b, kk]);
                    for i in 0..b {
                        for k in 0..kk {
                            g.set(i, k, weights[k] - resp.get(i, k));
                        }
                    }
                    fusion = Some(g);
                }
            }
        }

        for (k, enc) in trace.encoders.into_iter().enumerate() {
            let (Some(enc), Some(mut upstream)) = (enc, feature_grads[k].take()) else {
                continue;
            };
            let ids = &self.encoders[k];
            for l in (0..ids.len()).rev() {
                let pre = &enc.preacts[l];
                let mut delta = upstream;
                for (d, &z) in delta.data_mut().iter_mut().zip(pre.data()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                upstream = if l > 0 {
                    delta.matmul_nn(self.params.get(self.layer(ids[l]).weight))?
                } else {
                    Tensor::zeros(&[1])
                };
                linear[ids[l].0] = Some((delta, enc.inputs[l].clone()));
            }
        }

        Ok(LayerSignals {
            linear,
            fusion,
            batch_size: b,
        })
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-sample `−ln softmax(z)_y` via log-sum-exp.
fn ce_losses(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            (log_sum_exp(row) - row[y]).max(0.0)
        })
        .collect()
}

/// Rows `softmax(z_i) − e_{y_i}` (per-sample, not divided by B).
fn softmax_ce_delta(logits: &Tensor, labels: &[usize]) -> Tensor {
    let mut delta = logits.softmax_rows();
    for (i, &y) in labels.iter().enumerate() {
        delta.row_mut(i)[y] -= 1.0;
    }
    delta
}
