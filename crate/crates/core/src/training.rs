//! Minibatch training: loss wiring, Adam, center updates, epoch loop.

use std::collections::HashMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix};
use crate::data::{ImageSource, Sample, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{
    center_loss_batch, consistency_loss_batch, hyperprior_kl_batch, hyperprior_reg_grad, question_loss_batch,
    recon_loss_batch, total_loss, CenterBank, LossBreakdown, LossWeights,
};
use crate::model::{argmax, Model, TeacherBatch, TokenSequence, PAD};
use crate::optim::{clip_global_norm, Adam, AdamConfig};

const NOISE_SALT: u64 = 0x6e6f_6973_6521;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Center step size γ, in (0, 1).
    pub center_update_scale: f64,
    /// Global gradient-norm cap; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            center_update_scale: 0.5,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.center_update_scale > 0.0 && self.center_update_scale < 1.0) {
            return Err(Error::Config("center_update_scale must lie in (0, 1)".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Samples with images resolved to flat input rows and questions tokenized.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    images: Vec<Array1<f64>>,
    image_of: Vec<usize>,
    categories: Vec<usize>,
    questions: Vec<TokenSequence>,
}

impl EncodedDataset {
    /// Each distinct image is loaded once.
    pub fn new(samples: &[Sample], vocab: &Vocabulary, images: &ImageSource, max_len: usize) -> Result<Self> {
        let mut table = Vec::new();
        let mut seen = HashMap::new();
        let mut image_of = Vec::with_capacity(samples.len());
        let mut questions = Vec::with_capacity(samples.len());
        for s in samples {
            let idx = match seen.get(&s.image) {
                Some(&i) => i,
                None => {
                    table.push(images.load(&s.image)?.data);
                    seen.insert(s.image.clone(), table.len() - 1);
                    table.len() - 1
                }
            };
            image_of.push(idx);
            questions.push(vocab.encode(&s.question, max_len)?);
        }
        Ok(Self {
            images: table,
            image_of,
            categories: samples.iter().map(|s| s.category).collect(),
            questions,
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn category(&self, i: usize) -> usize {
        self.categories[i]
    }

    pub fn question(&self, i: usize) -> &TokenSequence {
        &self.questions[i]
    }

    pub fn image(&self, i: usize) -> &Array1<f64> {
        &self.images[self.image_of[i]]
    }

    /// Stacked image rows for the given samples.
    pub fn image_batch(&self, idx: &[usize]) -> Matrix {
        let cols = self.images.first().map_or(0, Array1::len);
        let mut m = Matrix::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).assign(self.image(i));
        }
        m
    }

    pub fn teacher_batch(&self, idx: &[usize]) -> Result<TeacherBatch> {
        let qs: Vec<&TokenSequence> = idx.iter().map(|&i| &self.questions[i]).collect();
        TeacherBatch::new(&qs)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub centers: CenterBank,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Per-step losses, measured before each update.
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let centers = CenterBank::zeros(model.n_categories(), model.latent_dim(), config.center_update_scale)?;
        let adam = Adam::new(config.adam(), model.params());
        Ok(Self {
            model,
            adam,
            centers,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }
}

/// Reparameterization noise for optimizer step `step`.
pub fn step_noise(seed: u64, step: u64, rows: usize, dim: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    rng.set_stream(step);
    Matrix::from_shape_simple_fn((rows, dim), || StandardNormal.sample(&mut rng))
}

/// Sample order for epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Loss value and parameter gradients for one batch at fixed parameters,
/// centers and noise.
pub fn batch_loss_and_grads(
    model: &Model,
    centers: &CenterBank,
    data: &EncodedDataset,
    batch: &[usize],
    weights: &LossWeights,
    noise: &Matrix,
) -> Result<(LossBreakdown, Vec<Option<Matrix>>, Matrix)> {
    let images = data.image_batch(batch);
    let cats: Vec<usize> = batch.iter().map(|&i| data.category(i)).collect();
    let teacher = data.teacher_batch(batch)?;
    let mut g = Graph::new();
    let f = model.forward_train(&mut g, &images, &cats, &teacher, noise)?;

    let logits: Vec<&Matrix> = f.step_logits.iter().map(|&v| g.value(v)).collect();
    let (lq, gq) = question_loss_batch(&logits, &teacher.targets)?;
    let (li, gi) = recon_loss_batch(g.value(f.image_recon), g.value(f.image_encoding))?;
    let (lc, gc) = recon_loss_batch(g.value(f.category_recon), g.value(f.category_encoding))?;
    let (lcons, gcons) = consistency_loss_batch(g.value(f.class_probs), &cats)?;
    let (lcen, gcen) = center_loss_batch(g.value(f.z), &cats, centers)?;
    let (lkl, gkl) = hyperprior_kl_batch(g.value(f.mean), g.value(f.logvar), g.value(f.log_alpha))?;
    let (lreg, greg) = hyperprior_reg_grad(g.value(f.log_alpha), weights.reg);
    let z = g.value(f.z).clone();

    let mut parts = LossBreakdown {
        question: lq,
        image: li,
        category: lc,
        consistency: lcons,
        center: lcen,
        bayes: lkl + lreg,
        total: 0.0,
    };
    parts.total = total_loss(&parts, weights)?;

    let q = g.scalar_op(lq, f.step_logits.clone(), gq);
    let neg_gi = -&gi;
    let i = g.scalar_op(li, vec![f.image_recon, f.image_encoding], vec![gi, neg_gi]);
    let neg_gc = -&gc;
    let c = g.scalar_op(lc, vec![f.category_recon, f.category_encoding], vec![gc, neg_gc]);
    let cons = g.scalar_op(lcons, vec![f.class_probs], vec![gcons]);
    let cen = g.scalar_op(lcen, vec![f.z], vec![gcen]);
    let bayes = g.scalar_op(
        lkl + lreg,
        vec![f.mean, f.logvar, f.log_alpha],
        vec![gkl.mean, gkl.logvar, gkl.log_alpha + greg],
    );
    let root = g.weighted_sum(&[
        (q, weights.question),
        (i, weights.image),
        (c, weights.category),
        (cons, weights.consistency),
        (cen, weights.center),
        (bayes, weights.bayes),
    ]);
    let grads = g.backward(root);
    Ok((parts, g.param_grads(&grads, model.params().len()), z))
}

/// One optimizer step on `batch`; returns the losses measured before the
/// update. Centers move after the parameter update, using that step's `z`.
pub fn train_step(
    state: &mut TrainState,
    data: &EncodedDataset,
    batch: &[usize],
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let noise = step_noise(config.seed, state.step, batch.len(), state.model.latent_dim());
    let (parts, mut grads, z) = batch_loss_and_grads(&state.model, &state.centers, data, batch, weights, &noise)
        .map_err(|e| match e {
            Error::NonFiniteLoss { component, value, .. } => Error::NonFiniteLoss {
                component,
                value,
                step: state.step,
            },
            other => other,
        })?;
    if let Some(max) = config.clip_grad_norm {
        clip_global_norm(&mut grads, max);
    }
    state.adam.step(state.model.params_mut(), &grads);
    state.model.params().all_finite().map_err(Error::NonFiniteParams)?;
    state
        .centers
        .update(batch.iter().enumerate().map(|(r, &i)| (z.row(r), data.category(i))))?;
    state.step += 1;
    state.history.push(parts);
    Ok(parts)
}

/// Mean losses of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

/// Run epochs `state.epoch .. config.epochs`, calling `on_epoch` after each.
/// Resuming a saved state continues the exact trajectory of an
/// uninterrupted run.
pub fn train_with<F>(
    state: &mut TrainState,
    data: &EncodedDataset,
    config: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&TrainState, &EpochSummary),
{
    config.validate()?;
    weights.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    while state.epoch < config.epochs {
        let order = epoch_order(config.seed, state.epoch, data.len());
        let mut sum = [0.0; 7];
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            let parts = train_step(state, data, batch, config, weights)?;
            for (s, v) in sum.iter_mut().zip(parts.to_array()) {
                *s += v;
            }
            steps += 1;
        }
        state.epoch += 1;
        let summary = EpochSummary {
            epoch: state.epoch,
            steps,
            mean: LossBreakdown::from_array(sum.map(|s| s / steps as f64)),
        };
        on_epoch(state, &summary);
    }
    Ok(())
}

pub fn train(state: &mut TrainState, data: &EncodedDataset, config: &TrainConfig, weights: &LossWeights) -> Result<()> {
    train_with(state, data, config, weights, |_, s| {
        log::info!("epoch {} mean total loss {:.6}", s.epoch, s.mean.total)
    })
}

/// Fraction of non-pad target tokens predicted by argmax under teacher
/// forcing with `z = μ`.
pub fn teacher_forced_accuracy(model: &Model, data: &EncodedDataset, batch_size: usize) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let cats: Vec<usize> = idx.iter().map(|&i| data.category(i)).collect();
        let z = model.latent_means(&data.image_batch(idx), &cats)?;
        let teacher = data.teacher_batch(idx)?;
        let logits = model.teacher_logits(&z, &teacher)?;
        for (t, step) in logits.iter().enumerate() {
            for b in 0..idx.len() {
                let target = teacher.targets[b][t];
                if target == PAD {
                    continue;
                }
                total += 1;
                if argmax(step.row(b)) == target {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Domain("no target tokens to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_toy_dataset;
    use crate::model::{ImageEncoderConfig, ModelConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 8,
            image_embed_dim: 8,
            category_embed_dim: 4,
            fusion_hidden_dim: 16,
            word_embed_dim: 8,
            decoder_hidden_dim: 16,
            classifier_embed_dim: 8,
            classifier_hidden_dim: 8,
            image_encoder: ImageEncoderConfig::Conv {
                channels: 3,
                size: 8,
                conv_channels: vec![4],
            },
            ..ModelConfig::default()
        }
    }

    fn setup(n_images: usize) -> (Model, EncodedDataset) {
        let toy = crate::data::ToyConfig {
            image_size: 8,
            ..crate::data::ToyConfig::new(n_images, 3, 1)
        }
        .generate()
        .unwrap();
        let cfg = tiny_config();
        let data = EncodedDataset::new(&toy.samples, &toy.vocab, &toy.image_source(), cfg.max_len).unwrap();
        let model = Model::init(cfg, toy.vocab.len(), 3, 5).unwrap();
        (model, data)
    }

    #[test]
    fn noise_and_order_are_seeded() {
        assert_eq!(step_noise(1, 4, 3, 2), step_noise(1, 4, 3, 2));
        assert_ne!(step_noise(1, 4, 3, 2), step_noise(1, 5, 3, 2));
        assert_eq!(epoch_order(2, 0, 50), epoch_order(2, 0, 50));
        assert_ne!(epoch_order(2, 0, 50), epoch_order(2, 1, 50));
    }

    #[test]
    fn zero_epochs_leaves_initial_state() {
        let (model, data) = setup(4);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(model.clone(), &cfg).unwrap();
        train(&mut state, &data, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(state.model.params(), model.params());
        assert_eq!(state.step, 0);
    }

    fn overfit_run(steps: usize) -> Vec<LossBreakdown> {
        let toy = crate::data::ToyConfig {
            image_size: 16,
            ..crate::data::ToyConfig::new(3, 3, 1)
        }
        .generate()
        .unwrap();
        let cfg = ModelConfig {
            image_encoder: ImageEncoderConfig::Conv {
                channels: 3,
                size: 16,
                conv_channels: vec![8, 16],
            },
            ..ModelConfig::default()
        };
        let data = EncodedDataset::new(&toy.samples, &toy.vocab, &toy.image_source(), cfg.max_len).unwrap();
        let model = Model::init(cfg, toy.vocab.len(), 3, 5).unwrap();
        let tc = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(model, &tc).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        for _ in 0..steps {
            train_step(&mut state, &data, &batch, &tc, &LossWeights::default()).unwrap();
        }
        state.history
    }

    // Sampled z keeps a noise floor of roughly 1.65 per latent dimension in
    // the center and KL terms, so the total cannot fall to a fifth of its
    // initial value; the question loss can.
    #[test]
    fn overfits_single_batch() {
        let h = overfit_run(1000);
        let (first, at200) = (h[0], h[199]);
        assert!(at200.question < 0.2 * first.question, "{first:?} -> {at200:?}");
        assert!(at200.total < 0.5 * first.total, "{first:?} -> {at200:?}");
        let mins: Vec<f64> = h
            .chunks(200)
            .map(|w| w.iter().map(|l| l.total).fold(f64::INFINITY, f64::min))
            .collect();
        let falling = mins.windows(2).filter(|p| p[1] < p[0]).count();
        assert!(falling * 10 >= (mins.len() - 1) * 9, "window minima {mins:?}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (model, data) = setup(3);
        let mut centers = CenterBank::zeros(3, model.latent_dim(), 0.5).unwrap();
        centers.centers.fill(0.1);
        let batch: Vec<usize> = (0..data.len()).collect();
        let noise = step_noise(0, 0, batch.len(), model.latent_dim());
        let (_, grads, _) =
            batch_loss_and_grads(&model, &centers, &data, &batch, &LossWeights::default(), &noise).unwrap();
        for (id, g) in grads.iter().enumerate() {
            let g = g.as_ref().unwrap_or_else(|| panic!("{} has no gradient", model.params().name(id)));
            assert!(g.iter().any(|&x| x != 0.0), "{} has zero gradient", model.params().name(id));
        }
    }

    #[test]
    fn breakdown_total_matches_weighted_sum() {
        let h = overfit_run(3);
        for parts in h {
            let again = total_loss(&parts, &LossWeights::default()).unwrap();
            assert!((again - parts.total).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let (model, data) = setup(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut s = TrainState::new(model.clone(), &cfg).unwrap();
            train(&mut s, &data, &cfg, &LossWeights::default()).unwrap();
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.step, 6);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, data) = setup(2);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(model.clone(), &cfg).unwrap();
        train(&mut s, &data, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(s.model.params(), model.params());
        assert_ne!(s.centers.centers, Matrix::zeros(s.centers.centers.raw_dim()));
    }

    #[test]
    fn rejects_bad_config() {
        let (model, _) = setup(1);
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(TrainState::new(model, &cfg).is_err());
        let _ = make_toy_dataset(2, 2, 0).unwrap();
    }
}
