use serde::{Deserialize, Serialize};

use crate::data::EncodedSplit;
use crate::scalar::Scalar;
use crate::tensor::Graph;

use super::encoder::argmax;
use super::{Encoder, ModelError, Result};

/// Mean cross-entropy, accuracy and macro-F1 over a labelled split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Metrics from row-major `[n × num_classes]` logits.
///
/// Macro-F1 averages per-class F1 over classes that occur either as a label
/// or as a prediction.
pub fn metrics_from_logits(
    logits: &[f64],
    labels: &[usize],
    num_classes: usize,
) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(ModelError::Input(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if logits.len() != labels.len() * num_classes {
        return Err(ModelError::Input(format!(
            "{} logits for {} labels and {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (row, &y) in logits.chunks(num_classes).zip(labels) {
        if y >= num_classes {
            return Err(ModelError::Input(format!("label {y} out of range")));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let pred = argmax(row);
        if pred == y {
            correct += 1;
            tp[y] += 1;
        } else {
            fp[pred] += 1;
            fneg[y] += 1;
        }
    }
    let (mut f1_sum, mut classes) = (0.0, 0usize);
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
            classes += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
        f1: if classes > 0 {
            f1_sum / classes as f64
        } else {
            0.0
        },
    })
}

/// Eval-mode logits for every example of `split`, in order.
pub fn predict_logits<T: Scalar>(
    model: &Encoder<T>,
    split: &EncodedSplit,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.len() * model.config().num_classes);
    for batch in split.sequential(batch_size) {
        let g = Graph::new();
        let o = model.forward(&g, &batch, None, false)?;
        o.logits
            .with_value(|v| out.extend(v.iter().map(|x| x.as_f64())));
    }
    Ok(out)
}

/// Eval-mode metrics of `model` on `split`.
pub fn evaluate<T: Scalar>(
    model: &Encoder<T>,
    split: &EncodedSplit,
    batch_size: usize,
) -> Result<Metrics> {
    if split.is_empty() {
        return Err(ModelError::Input(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let logits = predict_logits(model, split, batch_size)?;
    metrics_from_logits(&logits, &split.labels, model.config().num_classes)
}
