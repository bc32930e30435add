//! The six training objectives and their analytic gradients.
//!
//! Each loss comes in two forms: a per-sample function over the model's
//! domain types, and a batched `*_batch` function over matrices that also
//! returns the gradient with respect to its inputs. Batched losses average
//! over the batch.

mod center;
mod hyperprior;

pub use center::{center_loss, center_loss_batch, CenterBank};
pub use hyperprior::{hyperprior_kl, hyperprior_kl_batch, hyperprior_reg, hyperprior_reg_grad, HyperPrior, KlGrads};

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::{CategoryDistribution, EncodedCategory, EncodedImage, TokenLogits, TokenSequence, PAD};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Multipliers of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub image: f64,
    pub category: f64,
    pub question: f64,
    pub consistency: f64,
    pub center: f64,
    pub bayes: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            category: 2.0,
            question: 3.0,
            consistency: 2.0,
            center: 3.0,
            bayes: 3.0,
            reg: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("image", self.image),
            ("category", self.category),
            ("question", self.question),
            ("consistency", self.consistency),
            ("center", self.center),
            ("bayes", self.bayes),
            ("reg", self.reg),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-component losses of one batch. `bayes` already includes the
/// hyper-prior regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub question: f64,
    pub image: f64,
    pub category: f64,
    pub consistency: f64,
    pub center: f64,
    pub bayes: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("question", self.question),
            ("image", self.image),
            ("category", self.category),
            ("consistency", self.consistency),
            ("center", self.center),
            ("bayes", self.bayes),
        ]
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.question,
            self.image,
            self.category,
            self.consistency,
            self.center,
            self.bayes,
            self.total,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            question: a[0],
            image: a[1],
            category: a[2],
            consistency: a[3],
            center: a[4],
            bayes: a[5],
            total: a[6],
        }
    }
}

/// Weighted sum of the six components. Fails on the first non-finite part.
pub fn total_loss(parts: &LossBreakdown, weights: &LossWeights) -> Result<f64> {
    for (name, value) in parts.components() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name,
                value,
                step: 0,
            });
        }
    }
    Ok(weights.question * parts.question
        + weights.image * parts.image
        + weights.category * parts.category
        + weights.consistency * parts.consistency
        + weights.center * parts.center
        + weights.bayes * parts.bayes)
}

fn log_softmax_at(row: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = row.mapv(|x| (x - max).exp());
    let sum = exps.sum();
    let logp = row[target] - max - sum.ln();
    (logp, exps / sum)
}

/// Mean per-token negative log-likelihood of `gt` under `logits`.
///
/// Row `t` of `logits` scores token `t + 1` of `gt`; padded positions are
/// ignored.
pub fn question_loss(logits: &TokenLogits, gt: &TokenSequence) -> Result<f64> {
    let targets = &gt.tokens()[1..];
    if logits.0.nrows() != targets.len() {
        return Err(Error::Domain(format!(
            "{} logit rows for {} target tokens",
            logits.0.nrows(),
            targets.len()
        )));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for (row, &t) in logits.0.rows().into_iter().zip(targets) {
        if t == PAD {
            continue;
        }
        nll -= log_softmax_at(row, t).0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Domain("question has no target tokens".into()));
    }
    Ok(nll / count as f64)
}

/// Batched question loss. `step_logits[t]` is `B × V`; `targets[b][t]` is the
/// token expected at step `t` for sample `b` (PAD for masked positions).
/// Returns the batch mean of per-sample token-mean NLL and its gradient with
/// respect to every step's logits.
pub fn question_loss_batch(step_logits: &[&Matrix], targets: &[Vec<usize>]) -> Result<(f64, Vec<Matrix>)> {
    let batch = targets.len();
    if batch == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let steps = step_logits.len();
    let counts: Vec<usize> = targets
        .iter()
        .map(|t| {
            if t.len() != steps {
                return Err(Error::Domain(format!("{} target tokens for {steps} logit steps", t.len())));
            }
            Ok(t.iter().filter(|&&x| x != PAD).count())
        })
        .collect::<Result<_>>()?;
    if counts.contains(&0) {
        return Err(Error::Domain("question has no target tokens".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(steps);
    for (t, logits) in step_logits.iter().enumerate() {
        let mut g = Matrix::zeros(logits.raw_dim());
        for b in 0..batch {
            let target = targets[b][t];
            if target == PAD {
                continue;
            }
            let scale = 1.0 / (counts[b] as f64 * batch as f64);
            let (logp, probs) = log_softmax_at(logits.row(b), target);
            total -= logp * scale;
            let mut row = g.row_mut(b);
            row.assign(&(probs * scale));
            row[target] -= scale;
        }
        grads.push(g);
    }
    Ok((total, grads))
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖pred − target‖²`.
pub fn image_recon_loss(pred: &EncodedImage, target: &EncodedImage) -> Result<f64> {
    if pred.0.len() != target.0.len() {
        return Err(Error::Domain(format!(
            "image encodings differ in length: {} vs {}",
            pred.0.len(),
            target.0.len()
        )));
    }
    Ok(squared_distance(pred.0.view(), target.0.view()))
}

/// `‖pred − target‖²`.
pub fn category_recon_loss(pred: &EncodedCategory, target: &EncodedCategory) -> Result<f64> {
    if pred.0.len() != target.0.len() {
        return Err(Error::Domain(format!(
            "category encodings differ in length: {} vs {}",
            pred.0.len(),
            target.0.len()
        )));
    }
    Ok(squared_distance(pred.0.view(), target.0.view()))
}

/// Batch mean of row-wise squared distance; the gradient is with respect to
/// `pred` (the target's gradient is its negation).
pub fn recon_loss_batch(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.dim() != target.dim() {
        return Err(Error::Domain(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let batch = pred.nrows() as f64;
    let diff = pred - target;
    let value = diff.mapv(|d| d * d).sum() / batch;
    Ok((value, diff * (2.0 / batch)))
}

/// Cross-entropy of the predicted category distribution against the label.
pub fn consistency_loss(pred: &CategoryDistribution, gt: usize) -> Result<f64> {
    let p = pred
        .0
        .get(gt)
        .ok_or_else(|| Error::Domain(format!("category {gt} out of range for {} classes", pred.0.len())))?;
    Ok(-p.max(PROB_EPS).ln())
}

/// Batched consistency loss over a `B × n_c` probability matrix, with the
/// gradient with respect to the probabilities.
pub fn consistency_loss_batch(probs: &Matrix, gt: &[usize]) -> Result<(f64, Matrix)> {
    if probs.nrows() != gt.len() || gt.is_empty() {
        return Err(Error::Domain(format!("{} labels for {} predictions", gt.len(), probs.nrows())));
    }
    let batch = gt.len() as f64;
    let mut grad = Matrix::zeros(probs.raw_dim());
    let mut total = 0.0;
    for (b, &label) in gt.iter().enumerate() {
        if label >= probs.ncols() {
            return Err(Error::Domain(format!("category {label} out of range")));
        }
        let p = probs[[b, label]];
        total -= p.max(PROB_EPS).ln() / batch;
        if p > PROB_EPS {
            grad[[b, label]] = -1.0 / (p * batch);
        }
    }
    Ok((total, grad))
}
