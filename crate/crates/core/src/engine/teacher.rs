use serde::{Deserialize, Serialize};

use crate::data::EncodedSplit;
use crate::losses::loss_fink;
use crate::models::{evaluate, Encoder, Metrics};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, Graph, Optimizer, Rng, Tensor};

use super::{EngineError, Event, EventSink, Result, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    /// Dev metrics after each evaluated epoch.
    pub trajectory: Vec<Metrics>,
    pub dev: Metrics,
}

/// Supervised training of `model` on the ground-truth labels.
pub fn train_teacher<T: Scalar>(
    model: &mut Encoder<T>,
    train: &EncodedSplit,
    dev: &EncodedSplit,
    cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn EventSink,
) -> Result<TeacherReport> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(EngineError::Config(
            "teacher training needs non-empty train and dev splits".into(),
        ));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut dropout = Rng::new(seed).fork("teacher_dropout");
    let mut step = 0;
    let mut trajectory = Vec::new();
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in train.batches(cfg.batch_size, seed, epoch - 1, false) {
            step += 1;
            let g = Graph::new();
            let out = model.forward(&g, &batch, Some(&mut dropout), true)?;
            let loss = loss_fink(out.logits, &batch.labels)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(EngineError::Diverged {
                    step,
                    detail: format!("teacher loss is {value}"),
                });
            }
            g.backward(loss)?.accumulate_into(model.params_mut());
            opt.step(&mut model.params_mut())?;
            loss_sum += value;
            batches += 1;
        }
        let dev_metrics = if cfg.epoch_eval || epoch == cfg.epochs {
            let m = evaluate(model, dev, cfg.eval_batch_size)?;
            trajectory.push(m);
            last = Some(m);
            Some(m)
        } else {
            None
        };
        log::info!(
            "teacher epoch {epoch}: train loss {:.4}{}",
            loss_sum / batches.max(1) as f64,
            dev_metrics.map_or(String::new(), |m| format!(", dev acc {:.4}", m.accuracy))
        );
        sink.emit(Event::Epoch {
            run: "teacher".into(),
            episode: None,
            epoch,
            step,
            train_loss: loss_sum / batches.max(1) as f64,
            dev: dev_metrics,
        })?;
        sink.flush()?;
    }
    Ok(TeacherReport {
        steps: step,
        trajectory,
        dev: last.expect("at least one epoch is evaluated"),
    })
}

/// Eval-mode teacher logits and per-layer CLS embeddings for every example of
/// a split, so distillation never re-runs the teacher.
#[derive(Debug, Clone)]
pub struct TeacherCache<T> {
    num_classes: usize,
    hidden: usize,
    logits: Vec<T>,
    /// One `[n × H]` block per layer.
    cls: Vec<Vec<T>>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn build(teacher: &Encoder<T>, split: &EncodedSplit, batch_size: usize) -> Result<Self> {
        let cfg = teacher.config();
        let mut cache = TeacherCache {
            num_classes: cfg.num_classes,
            hidden: cfg.hidden_size,
            logits: Vec::with_capacity(split.len() * cfg.num_classes),
            cls: vec![Vec::with_capacity(split.len() * cfg.hidden_size); cfg.num_layers],
        };
        for batch in split.sequential(batch_size.max(1)) {
            let g = Graph::new();
            let out = teacher.forward(&g, &batch, None, false)?;
            out.logits.with_value(|v| cache.logits.extend_from_slice(v));
            for (dst, t) in cache.cls.iter_mut().zip(&out.cls) {
                t.with_value(|v| dst.extend_from_slice(v));
            }
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.logits.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.cls.len()
    }

    /// Constant logits `[B × C]` and per-layer CLS `[B × H]` for the given
    /// example indices.
    pub fn tensors<'g>(
        &self,
        g: &'g Graph<T>,
        indices: &[usize],
    ) -> Result<(Tensor<'g, T>, Vec<Tensor<'g, T>>)> {
        let gather = |src: &[T], width: usize| -> Vec<T> {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            out
        };
        let b = indices.len();
        let logits = g.constant(
            vec![b, self.num_classes],
            gather(&self.logits, self.num_classes),
        )?;
        let cls = self
            .cls
            .iter()
            .map(|c| g.constant(vec![b, self.hidden], gather(c, self.hidden)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((logits, cls))
    }
}
