//! Minibatch SGD with classical momentum, per-batch loss ranking for the
//! dynamic-regularization and drop-ablation objectives, and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, dreg_per_sample, LossOut, LossSpec};
use crate::metrics::PredictionSet;
use crate::model::{argmax, backward, forward, init_params, softmax, MlpParams, ModelConfig};
use crate::rng::{round_count, stream};
use crate::synthdata::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    /// Fraction of the samples seen in each epoch that were assigned δ = 0.
    pub epoch_delta_zero: Vec<f64>,
    pub params: MlpParams,
}

/// δ for one batch: the `⌊eta·B⌉` largest losses get 0, the rest 1. Ties
/// are broken toward the lower index.
pub fn assign_delta(losses: &[f64], eta: f64) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Domain(format!("eta must lie in [0, 1), got {eta}")));
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Numeric("NaN in per-sample losses".into()));
    }
    let m = round_count(eta * losses.len() as f64).min(losses.len());
    let mut order: Vec<usize> = (0..losses.len()).collect();
    // Stable sort keeps lower indices first among equal losses.
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut delta = vec![1u8; losses.len()];
    for &i in &order[..m] {
        delta[i] = 0;
    }
    Ok(delta)
}

/// Loss and parameter gradient of one batch under `spec`.
pub struct BatchStep {
    /// Mean loss over the samples that contribute to the objective.
    pub loss: f64,
    pub grad: MlpParams,
    /// Number of samples assigned δ = 0.
    pub n_delta_zero: usize,
}

/// Evaluates the batch objective: DReg averages the per-sample mixture over
/// the whole batch; RC averages CE over the δ = 1 samples only; all other
/// objectives average their per-sample loss.
pub fn batch_objective(
    params: &MlpParams,
    spec: &LossSpec,
    ds: &LabeledDataset,
    batch: &[usize],
) -> Result<BatchStep> {
    let traces = batch
        .iter()
        .map(|&i| forward(params, ds.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();

    let (outs, delta): (Vec<Option<LossOut>>, Vec<u8>) = match *spec {
        LossSpec::Dreg { eta, beta } => {
            let ce = per_sample_ce(&traces, &labels)?;
            let delta = assign_delta(&ce.iter().map(|o| o.value).collect::<Vec<_>>(), eta)?;
            let outs = ce
                .into_iter()
                .zip(&traces)
                .zip(&labels)
                .zip(&delta)
                .map(|(((ce, t), &y), &d)| {
                    if d == 1 {
                        Ok(Some(ce))
                    } else {
                        dreg_per_sample(t.logits(), y, 0, beta).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (outs, delta)
        }
        LossSpec::Rc { eta } => {
            let ce = per_sample_ce(&traces, &labels)?;
            let delta = assign_delta(&ce.iter().map(|o| o.value).collect::<Vec<_>>(), eta)?;
            let outs = ce.into_iter().zip(&delta).map(|(o, &d)| (d == 1).then_some(o)).collect();
            (outs, delta)
        }
        _ => {
            let outs = traces
                .iter()
                .zip(&labels)
                .map(|(t, &y)| spec.per_sample(t.logits(), y).map(Some))
                .collect::<Result<Vec<_>>>()?;
            (outs, vec![1; batch.len()])
        }
    };

    let used = outs.iter().filter(|o| o.is_some()).count();
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    if used > 0 {
        let scale = 1.0 / used as f64;
        for (out, trace) in outs.iter().zip(&traces) {
            if let Some(out) = out {
                loss += out.value;
                grad.add_scaled(&backward(params, trace, &out.grad_logits)?, scale);
            }
        }
        loss *= scale;
    }
    Ok(BatchStep {
        loss,
        grad,
        n_delta_zero: delta.iter().filter(|d| **d == 0).count(),
    })
}

fn per_sample_ce(traces: &[crate::model::ForwardTrace], labels: &[usize]) -> Result<Vec<LossOut>> {
    traces
        .iter()
        .zip(labels)
        .map(|(t, &y)| cross_entropy(t.logits(), y))
        .collect()
}

/// Runs `epochs × ⌈n/B⌉` momentum-SGD steps from freshly initialized
/// parameters. Each epoch draws one permutation of the training set from the
/// `train/shuffle` stream and cuts it into consecutive batches; the last one
/// may be short.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, ds: &LabeledDataset) -> Result<TrainReport> {
    let params = init_params(model_cfg)?;
    train_from(cfg, params, ds)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(cfg: &TrainConfig, mut params: MlpParams, ds: &LabeledDataset) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if ds.dim() != params.input_dim() || ds.n_classes() != params.n_classes() {
        return Err(Error::Shape(format!(
            "dataset is {}-dimensional with K={}, model maps {} → {}",
            ds.dim(),
            ds.n_classes(),
            params.input_dim(),
            params.n_classes()
        )));
    }
    let mut rng = stream(cfg.seed, "train/shuffle");
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_delta_zero = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;
        let mut zeros = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let out = batch_objective(&params, &cfg.loss, ds, batch)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("batch loss {}", out.loss),
                });
            }
            let used = batch.len() - if matches!(cfg.loss, LossSpec::Rc { .. }) { out.n_delta_zero } else { 0 };
            loss_sum += out.loss * used as f64;
            loss_weight += used;
            zeros += out.n_delta_zero;

            // v ← μv − lr(g + λθ);  θ ← θ + v
            for ((v, g), p) in velocity.values_mut().zip(out.grad.values()).zip(params.values()) {
                *v = cfg.momentum * *v - cfg.lr * (g + cfg.weight_decay * p);
            }
            params.add_scaled(&velocity, 1.0);
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: "non-finite parameters".into(),
                });
            }
        }
        epoch_loss.push(if loss_weight > 0 { loss_sum / loss_weight as f64 } else { 0.0 });
        epoch_delta_zero.push(zeros as f64 / ds.len() as f64);
    }
    Ok(TrainReport {
        epoch_loss,
        epoch_delta_zero,
        params,
    })
}

/// Per-sample predictions of `params` on `ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confidences: Vec<f64>,
    pub predicted: Vec<usize>,
    pub correct: Vec<bool>,
    pub probs: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len().max(1) as f64
    }

    pub fn prediction_set(&self, labels: &[usize]) -> Result<PredictionSet> {
        PredictionSet::from_probs(self.probs.clone(), labels.to_vec())
    }
}

pub fn evaluate(params: &MlpParams, ds: &LabeledDataset) -> Result<Evaluation> {
    let mut eval = Evaluation {
        confidences: Vec::with_capacity(ds.len()),
        predicted: Vec::with_capacity(ds.len()),
        correct: Vec::with_capacity(ds.len()),
        probs: Vec::with_capacity(ds.len()),
    };
    for (row, &y) in ds.rows().zip(ds.labels()) {
        let probs = softmax(forward(params, row)?.logits())?;
        let label = argmax(&probs);
        eval.confidences.push(probs[label]);
        eval.predicted.push(label);
        eval.correct.push(label == y);
        eval.probs.push(probs);
    }
    Ok(eval)
}
