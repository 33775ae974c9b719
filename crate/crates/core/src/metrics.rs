//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::data::{argmax, LabeledBatch};
use crate::error::{AmssError, Result};
use crate::model::MultiModalModel;
use crate::tensor::Tensor;

pub fn predictions(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|i| argmax(probs.row(i))).collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(AmssError::InvalidInput(format!(
            "accuracy needs equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over all `classes`. A precision or
/// recall with a zero denominator counts as 0, and so does an F1 whose
/// precision and recall are both 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() || classes == 0 {
        return Err(AmssError::InvalidInput("macro-F1 needs equal lengths and classes > 0".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(AmssError::InvalidInput(format!("label out of range: {p} / {t}")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let total: f64 = (0..classes)
        .map(|c| {
            let p = ratio(tp[c], fp[c]);
            let r = ratio(tp[c], fneg[c]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum();
    Ok(total / classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss: f64,
    /// Accuracy of each modality's unimodal prediction.
    pub branch_accuracy: Vec<f64>,
}

pub fn evaluate(model: &MultiModalModel, batch: &LabeledBatch) -> Result<Evaluation> {
    let truth = batch.label_indices();
    let (loss, cache) = model.forward(batch)?;
    let pred = predictions(cache.probs());
    let branch_accuracy = (0..model.modalities())
        .map(|k| accuracy(&predictions(&model.predict_unimodal(batch, k)?), &truth))
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        accuracy: accuracy(&pred, &truth)?,
        macro_f1: macro_f1(&pred, &truth, model.classes())?,
        loss,
        branch_accuracy,
    })
}
