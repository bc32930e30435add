//! The learnable networks: image and category encoders, the fusion network
//! producing the latent Gaussian, the question decoder, the two
//! reconstruction heads and the recurrent category classifier.
//!
//! Everything is expressed twice: batched functions that record onto an
//! [`autograd::Graph`](crate::autograd::Graph) for training, and per-sample
//! convenience methods that run the same graph code with a batch of one.

mod types;

pub use types::*;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, ConvGeometry, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::params::{Init, Layout, ModelParams};

/// Architecture of the image encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageEncoderConfig {
    /// Stack of 3×3 stride-2 convolutions with ReLU, then a linear projection.
    Conv {
        channels: usize,
        size: usize,
        conv_channels: Vec<usize>,
    },
    /// Precomputed feature vectors of length `dim`, linearly projected.
    Features { dim: usize },
}

impl ImageEncoderConfig {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            Self::Conv { channels, size, .. } => (*channels, *size, *size),
            Self::Features { dim } => (*dim, 1, 1),
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape();
        c * h * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dimension `d` of the combined latent space.
    pub latent_dim: usize,
    pub image_embed_dim: usize,
    pub category_embed_dim: usize,
    pub fusion_hidden_dim: usize,
    pub word_embed_dim: usize,
    pub decoder_hidden_dim: usize,
    pub classifier_embed_dim: usize,
    pub classifier_hidden_dim: usize,
    /// Maximum question length in tokens, start and end markers included.
    pub max_len: usize,
    /// Temperature of the softmax relaxation feeding generated questions to
    /// the classifier.
    pub soft_temperature: f64,
    pub image_encoder: ImageEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            image_embed_dim: 64,
            category_embed_dim: 32,
            fusion_hidden_dim: 128,
            word_embed_dim: 32,
            decoder_hidden_dim: 128,
            classifier_embed_dim: 32,
            classifier_hidden_dim: 64,
            max_len: 20,
            soft_temperature: 1.0,
            image_encoder: ImageEncoderConfig::Conv {
                channels: 3,
                size: 64,
                conv_channels: vec![16, 32],
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("image_embed_dim", self.image_embed_dim),
            ("category_embed_dim", self.category_embed_dim),
            ("fusion_hidden_dim", self.fusion_hidden_dim),
            ("word_embed_dim", self.word_embed_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
            ("classifier_embed_dim", self.classifier_embed_dim),
            ("classifier_hidden_dim", self.classifier_hidden_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if !(self.soft_temperature > 0.0) {
            return Err(Error::Config("soft_temperature must be positive".into()));
        }
        match &self.image_encoder {
            ImageEncoderConfig::Conv {
                channels,
                size,
                conv_channels,
            } => {
                if *channels == 0 || *size == 0 {
                    return Err(Error::Config("conv encoder needs positive channels and size".into()));
                }
                if conv_channels.contains(&0) {
                    return Err(Error::Config("conv_channels entries must be positive".into()));
                }
            }
            ImageEncoderConfig::Features { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("feature dim must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    fn new(layout: &mut Layout, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), (input, output), Init::KaimingNormal { fan_in: input }),
            bias: layout.add(format!("{name}.bias"), (1, output), Init::Zeros),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ModelParams, x: Var) -> Var {
        let w = g.param(self.weight, p.get(self.weight));
        let b = g.param(self.bias, p.get(self.bias));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: usize,
    geom: ConvGeometry,
}

#[derive(Debug, Clone)]
struct Lstm {
    weight: usize,
    bias: usize,
    hidden: usize,
}

impl Lstm {
    fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            weight: layout.add(
                format!("{name}.weight"),
                (input + hidden, 4 * hidden),
                Init::KaimingNormal { fan_in: input + hidden },
            ),
            bias: layout.add(format!("{name}.bias"), (1, 4 * hidden), Init::Zeros),
            hidden,
        }
    }

    /// One step; gates are laid out as input, forget, cell, output.
    fn step(&self, g: &mut Graph, p: &ModelParams, x: Var, h: Var, c: Var) -> (Var, Var) {
        let w = g.param(self.weight, p.get(self.weight));
        let b = g.param(self.bias, p.get(self.bias));
        let xh = g.concat(&[x, h]);
        let pre = g.matmul(xh, w);
        let pre = g.add_row(pre, b);
        let n = self.hidden;
        let i = g.slice_cols(pre, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(pre, n, 2 * n);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(pre, 2 * n, 3 * n);
        let cand = g.tanh(cand);
        let o = g.slice_cols(pre, 3 * n, 4 * n);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}

#[derive(Debug, Clone)]
enum ImageEncoder {
    Conv { convs: Vec<Conv>, proj: Linear },
    Features { proj: Linear },
}

#[derive(Debug, Clone)]
struct Network {
    image: ImageEncoder,
    category_embedding: usize,
    fusion_hidden: Linear,
    fusion_out: Linear,
    word_embedding: usize,
    decoder_init: Linear,
    decoder: Lstm,
    decoder_out: Linear,
    image_head: Linear,
    category_head: Linear,
    classifier_embedding: usize,
    classifier: Lstm,
    classifier_out: Linear,
    log_alpha: usize,
}

impl Network {
    fn build(config: &ModelConfig, vocab_size: usize, n_categories: usize) -> (Self, Layout) {
        let mut l = Layout::default();
        let d = config.latent_dim;
        let image = match &config.image_encoder {
            ImageEncoderConfig::Conv {
                channels,
                size,
                conv_channels,
            } => {
                let mut convs = Vec::new();
                let (mut c, mut s) = (*channels, *size);
                for (i, &out) in conv_channels.iter().enumerate() {
                    let geom = ConvGeometry {
                        in_channels: c,
                        height: s,
                        width: s,
                        out_channels: out,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    };
                    let weight = l.add(
                        format!("image_encoder.conv{i}.weight"),
                        (out, geom.patch_len()),
                        Init::KaimingNormal {
                            fan_in: geom.patch_len(),
                        },
                    );
                    let bias = l.add(format!("image_encoder.conv{i}.bias"), (1, out), Init::Zeros);
                    convs.push(Conv { weight, bias, geom });
                    c = out;
                    s = geom.out_height();
                }
                let proj = Linear::new(&mut l, "image_encoder.proj", c * s * s, config.image_embed_dim);
                ImageEncoder::Conv { convs, proj }
            }
            ImageEncoderConfig::Features { dim } => ImageEncoder::Features {
                proj: Linear::new(&mut l, "image_encoder.proj", *dim, config.image_embed_dim),
            },
        };
        let category_embedding = l.add(
            "category_encoder.embedding",
            (n_categories, config.category_embed_dim),
            Init::KaimingNormal {
                fan_in: config.category_embed_dim,
            },
        );
        let fusion_hidden = Linear::new(
            &mut l,
            "fusion.hidden",
            config.image_embed_dim + config.category_embed_dim,
            config.fusion_hidden_dim,
        );
        let fusion_out = Linear::new(&mut l, "fusion.out", config.fusion_hidden_dim, 2 * d);
        let word_embedding = l.add(
            "decoder.embedding",
            (vocab_size, config.word_embed_dim),
            Init::KaimingNormal {
                fan_in: config.word_embed_dim,
            },
        );
        let decoder_init = Linear::new(&mut l, "decoder.init", d, config.decoder_hidden_dim);
        let decoder = Lstm::new(&mut l, "decoder.lstm", config.word_embed_dim + d, config.decoder_hidden_dim);
        let decoder_out = Linear::new(&mut l, "decoder.out", config.decoder_hidden_dim, vocab_size);
        let image_head = Linear::new(&mut l, "image_head", d, config.image_embed_dim);
        let category_head = Linear::new(&mut l, "category_head", d, config.category_embed_dim);
        let classifier_embedding = l.add(
            "classifier.embedding",
            (vocab_size, config.classifier_embed_dim),
            Init::KaimingNormal {
                fan_in: config.classifier_embed_dim,
            },
        );
        let classifier = Lstm::new(
            &mut l,
            "classifier.lstm",
            config.classifier_embed_dim,
            config.classifier_hidden_dim,
        );
        let classifier_out = Linear::new(&mut l, "classifier.out", config.classifier_hidden_dim, n_categories);
        let log_alpha = l.add("hyperprior.log_alpha", (1, d), Init::Zeros);
        (
            Self {
                image,
                category_embedding,
                fusion_hidden,
                fusion_out,
                word_embedding,
                decoder_init,
                decoder,
                decoder_out,
                image_head,
                category_head,
                classifier_embedding,
                classifier,
                classifier_out,
                log_alpha,
            },
            l,
        )
    }
}

/// Graph handles of one training forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub image_encoding: Var,
    pub category_encoding: Var,
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
    pub step_logits: Vec<Var>,
    pub image_recon: Var,
    pub category_recon: Var,
    pub class_probs: Var,
    pub log_alpha: Var,
}

/// Teacher-forcing view of a batch of questions.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBatch {
    /// `inputs[b][t]`: token fed at step `t` (PAD past the sample's end).
    pub inputs: Vec<Vec<usize>>,
    /// `targets[b][t]`: token predicted at step `t` (PAD past the end).
    pub targets: Vec<Vec<usize>>,
    /// Number of valid steps per sample.
    pub lengths: Vec<usize>,
}

impl TeacherBatch {
    pub fn new(questions: &[&TokenSequence]) -> Result<Self> {
        let mut lengths = Vec::with_capacity(questions.len());
        for q in questions {
            let n = q.body().len();
            if n == 0 {
                return Err(Error::Domain("teacher sequence has no tokens after the start marker".into()));
            }
            lengths.push(n);
        }
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(questions.len());
        let mut targets = Vec::with_capacity(questions.len());
        for (q, &n) in questions.iter().zip(&lengths) {
            let toks = q.tokens();
            let mut inp = toks[..n].to_vec();
            let mut tgt = toks[1..=n].to_vec();
            inp.resize(steps, PAD);
            tgt.resize(steps, PAD);
            inputs.push(inp);
            targets.push(tgt);
        }
        Ok(Self {
            inputs,
            targets,
            lengths,
        })
    }

    pub fn steps(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Input to the category classifier.
#[derive(Debug, Clone, Copy)]
pub enum QuestionInput<'a> {
    /// Soft relaxation: each step consumes the softmax-weighted embedding.
    Logits(&'a TokenLogits),
    /// Discrete tokens (the start marker is skipped).
    Tokens(&'a TokenSequence),
}

/// Architecture plus parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    n_categories: usize,
    net: Network,
    layout: Layout,
    params: ModelParams,
}

impl Model {
    /// Parameter layout for a configuration, without drawing any values.
    pub fn layout(config: &ModelConfig, vocab_size: usize, n_categories: usize) -> Layout {
        Network::build(config, vocab_size, n_categories).1
    }

    /// Fresh model with Kaiming-initialized weights.
    pub fn init(config: ModelConfig, vocab_size: usize, n_categories: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size <= N_SPECIALS || n_categories == 0 {
            return Err(Error::Config(format!(
                "need a vocabulary beyond the specials and at least one category (got V={vocab_size}, n_c={n_categories})"
            )));
        }
        let (net, layout) = Network::build(&config, vocab_size, n_categories);
        let params = ModelParams::init(&layout, seed);
        Ok(Self {
            config,
            vocab_size,
            n_categories,
            net,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, vocab_size: usize, n_categories: usize, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let (net, layout) = Network::build(&config, vocab_size, n_categories);
        let named = params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
        let params = ModelParams::from_named(&layout, named)?;
        Ok(Self {
            config,
            vocab_size,
            n_categories,
            net,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn param_layout(&self) -> &Layout {
        &self.layout
    }

    pub fn log_alpha_id(&self) -> usize {
        self.net.log_alpha
    }

    fn check_images(&self, images: &Matrix) -> Result<()> {
        let expected = self.config.image_encoder.input_len();
        if images.ncols() != expected {
            return Err(Error::Config(format!(
                "image input has {} values, encoder expects {expected}",
                images.ncols()
            )));
        }
        Ok(())
    }

    fn check_categories(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&c| c >= self.n_categories) {
            return Err(Error::Domain(format!(
                "category id {bad} out of range for {} categories",
                self.n_categories
            )));
        }
        Ok(())
    }

    // ---- batched graph functions ----

    pub fn encode_images_g(&self, g: &mut Graph, images: &Matrix) -> Result<Var> {
        self.check_images(images)?;
        let p = &self.params;
        let x = g.input(images.clone());
        Ok(match &self.net.image {
            ImageEncoder::Conv { convs, proj } => {
                let mut h = x;
                for conv in convs {
                    let w = g.param(conv.weight, p.get(conv.weight));
                    let b = g.param(conv.bias, p.get(conv.bias));
                    h = g.conv2d(h, w, b, conv.geom);
                    h = g.relu(h);
                }
                proj.forward(g, p, h)
            }
            ImageEncoder::Features { proj } => proj.forward(g, p, x),
        })
    }

    pub fn encode_categories_g(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.check_categories(ids)?;
        let table = g.param(self.net.category_embedding, self.params.get(self.net.category_embedding));
        Ok(g.gather_rows(table, ids))
    }

    /// Returns `(mean, log-variance)` of the latent Gaussian.
    pub fn fuse_g(&self, g: &mut Graph, image: Var, category: Var) -> (Var, Var) {
        let x = g.concat(&[image, category]);
        let h = self.net.fusion_hidden.forward(g, &self.params, x);
        let h = g.relu(h);
        let out = self.net.fusion_out.forward(g, &self.params, h);
        let d = self.config.latent_dim;
        (g.slice_cols(out, 0, d), g.slice_cols(out, d, 2 * d))
    }

    /// `z = μ + exp(½ log σ²) ⊙ noise`.
    pub fn sample_g(&self, g: &mut Graph, mean: Var, logvar: Var, noise: &Matrix) -> Var {
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let scaled = g.mul_const(std, noise.clone());
        g.add(mean, scaled)
    }

    fn decoder_state(&self, g: &mut Graph, z: Var) -> (Var, Var) {
        let h = self.net.decoder_init.forward(g, &self.params, z);
        let h = g.tanh(h);
        let rows = g.value(z).nrows();
        let c = g.input(Matrix::zeros((rows, self.config.decoder_hidden_dim)));
        (h, c)
    }

    fn decoder_step(&self, g: &mut Graph, z: Var, tokens: &[usize], h: Var, c: Var) -> (Var, Var, Var) {
        let table = g.param(self.net.word_embedding, self.params.get(self.net.word_embedding));
        let emb = g.gather_rows(table, tokens);
        let x = g.concat(&[emb, z]);
        let (h, c) = self.net.decoder.step(g, &self.params, x, h, c);
        let logits = self.net.decoder_out.forward(g, &self.params, h);
        (logits, h, c)
    }

    /// Teacher-forced decoding; one `B × V` logit node per step.
    pub fn decode_teacher_g(&self, g: &mut Graph, z: Var, teacher: &TeacherBatch) -> Result<Vec<Var>> {
        if teacher.inputs.len() != g.value(z).nrows() {
            return Err(Error::Domain("teacher batch size differs from latent batch".into()));
        }
        if let Some(&bad) = teacher.inputs.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Domain(format!("token {bad} out of vocabulary range")));
        }
        let (mut h, mut c) = self.decoder_state(g, z);
        let mut out = Vec::with_capacity(teacher.steps());
        for t in 0..teacher.steps() {
            let tokens: Vec<usize> = teacher.inputs.iter().map(|row| row[t]).collect();
            let (logits, h2, c2) = self.decoder_step(g, z, &tokens, h, c);
            h = h2;
            c = c2;
            out.push(logits);
        }
        Ok(out)
    }

    /// Free-running relaxed decoding: step `t + 1` consumes the expected
    /// embedding under step `t`'s softened distribution. Returns the per-step
    /// `B × V` distributions.
    pub fn decode_soft_g(&self, g: &mut Graph, z: Var, steps: usize) -> Vec<Var> {
        let rows = g.value(z).nrows();
        let table = g.param(self.net.word_embedding, self.params.get(self.net.word_embedding));
        let (mut h, mut c) = self.decoder_state(g, z);
        let mut emb = g.gather_rows(table, &vec![START; rows]);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x = g.concat(&[emb, z]);
            let (h2, c2) = self.net.decoder.step(g, &self.params, x, h, c);
            h = h2;
            c = c2;
            let logits = self.net.decoder_out.forward(g, &self.params, h);
            let probs = self.soften_g(g, logits);
            emb = g.matmul(probs, table);
            out.push(probs);
        }
        out
    }

    pub fn reconstruct_image_g(&self, g: &mut Graph, z: Var) -> Var {
        self.net.image_head.forward(g, &self.params, z)
    }

    pub fn reconstruct_category_g(&self, g: &mut Graph, z: Var) -> Var {
        self.net.category_head.forward(g, &self.params, z)
    }

    /// Runs the classifier over per-step `B × V` token distributions. Steps
    /// at or beyond `lengths[b]` leave sample `b`'s state untouched.
    pub fn classify_g(&self, g: &mut Graph, step_probs: &[Var], lengths: &[usize]) -> Result<Var> {
        if step_probs.is_empty() || lengths.contains(&0) {
            return Err(Error::Domain("classifier needs a nonempty question".into()));
        }
        let batch = lengths.len();
        let hidden = self.config.classifier_hidden_dim;
        let table = g.param(self.net.classifier_embedding, self.params.get(self.net.classifier_embedding));
        let mut h = g.input(Matrix::zeros((batch, hidden)));
        let mut c = g.input(Matrix::zeros((batch, hidden)));
        for (t, &probs) in step_probs.iter().enumerate() {
            let x = g.matmul(probs, table);
            let (h_new, c_new) = self.net.classifier.step(g, &self.params, x, h, c);
            if lengths.iter().all(|&n| t < n) {
                h = h_new;
                c = c_new;
            } else {
                let keep = Matrix::from_shape_fn((batch, hidden), |(b, _)| if t < lengths[b] { 1.0 } else { 0.0 });
                let hold = keep.mapv(|m| 1.0 - m);
                let a = g.mul_const(h_new, keep.clone());
                let bh = g.mul_const(h, hold.clone());
                h = g.add(a, bh);
                let a = g.mul_const(c_new, keep);
                let bc = g.mul_const(c, hold);
                c = g.add(a, bc);
            }
        }
        let logits = self.net.classifier_out.forward(g, &self.params, h);
        Ok(g.softmax(logits))
    }

    /// Softmax relaxation of decoder logits at the configured temperature.
    pub fn soften_g(&self, g: &mut Graph, logits: Var) -> Var {
        let scaled = if self.config.soft_temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / self.config.soft_temperature)
        };
        g.softmax(scaled)
    }

    /// Full training forward pass: encode, fuse, sample, decode with teacher
    /// forcing, reconstruct, then classify a free-running relaxed decode of
    /// the same `z` (as many steps as the teacher batch).
    pub fn forward_train(
        &self,
        g: &mut Graph,
        images: &Matrix,
        categories: &[usize],
        teacher: &TeacherBatch,
        noise: &Matrix,
    ) -> Result<BatchForward> {
        let batch = categories.len();
        if images.nrows() != batch || teacher.inputs.len() != batch || noise.dim() != (batch, self.config.latent_dim) {
            return Err(Error::Domain("batch components have inconsistent sizes".into()));
        }
        let image_encoding = self.encode_images_g(g, images)?;
        let category_encoding = self.encode_categories_g(g, categories)?;
        let (mean, logvar) = self.fuse_g(g, image_encoding, category_encoding);
        let z = self.sample_g(g, mean, logvar, noise);
        let step_logits = self.decode_teacher_g(g, z, teacher)?;
        let image_recon = self.reconstruct_image_g(g, z);
        let category_recon = self.reconstruct_category_g(g, z);
        let soft = self.decode_soft_g(g, z, teacher.steps());
        let class_probs = self.classify_g(g, &soft, &teacher.lengths)?;
        let log_alpha = g.param(self.net.log_alpha, self.params.get(self.net.log_alpha));
        Ok(BatchForward {
            image_encoding,
            category_encoding,
            mean,
            logvar,
            z,
            step_logits,
            image_recon,
            category_recon,
            class_probs,
            log_alpha,
        })
    }

    // ---- per-sample API ----

    pub fn encode_image(&self, image: &ImageTensor) -> Result<EncodedImage> {
        let expected = self.config.image_encoder.input_shape();
        if image.shape() != expected {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                expected
            )));
        }
        let mut g = Graph::new();
        let v = self.encode_images_g(&mut g, &row_matrix(&image.data))?;
        Ok(EncodedImage(g.value(v).row(0).to_owned()))
    }

    pub fn encode_category(&self, category: usize) -> Result<EncodedCategory> {
        let mut g = Graph::new();
        let v = self.encode_categories_g(&mut g, &[category])?;
        Ok(EncodedCategory(g.value(v).row(0).to_owned()))
    }

    pub fn fuse(&self, image: &EncodedImage, category: &EncodedCategory) -> Result<LatentDistribution> {
        if image.0.len() != self.config.image_embed_dim || category.0.len() != self.config.category_embed_dim {
            return Err(Error::Config(format!(
                "encodings of length ({}, {}) do not match configured ({}, {})",
                image.0.len(),
                category.0.len(),
                self.config.image_embed_dim,
                self.config.category_embed_dim
            )));
        }
        let mut g = Graph::new();
        let hi = g.input(row_matrix(&image.0));
        let hc = g.input(row_matrix(&category.0));
        let (mean, logvar) = self.fuse_g(&mut g, hi, hc);
        Ok(LatentDistribution::from_logvar(
            g.value(mean).row(0).to_owned(),
            &g.value(logvar).row(0).to_owned(),
        ))
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        if z.0.len() != self.config.latent_dim {
            return Err(Error::Config(format!(
                "latent code has {} dims, model uses {}",
                z.0.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits when `teacher` is given (one row per token after
    /// the start marker), otherwise greedy decoding until the end marker or
    /// `max_len` tokens.
    pub fn decode_question(&self, z: &LatentCode, teacher: Option<&TokenSequence>, max_len: usize) -> Result<TokenLogits> {
        self.check_latent(z)?;
        match teacher {
            Some(seq) => {
                if seq.body().is_empty() {
                    return Err(Error::Domain("teacher sequence is empty".into()));
                }
                if seq.body().len() + 1 > max_len {
                    return Err(Error::Domain(format!(
                        "teacher of {} tokens exceeds max_len {max_len}",
                        seq.body().len() + 1
                    )));
                }
                let batch = TeacherBatch::new(&[seq])?;
                let mut g = Graph::new();
                let zv = g.input(row_matrix(&z.0));
                let steps = self.decode_teacher_g(&mut g, zv, &batch)?;
                Ok(stack_rows(&g, &steps))
            }
            None => {
                let (_, logits) = self.decode_with(z, max_len, |row| argmax(row.view()))?;
                Ok(logits)
            }
        }
    }

    /// Autoregressive decoding where `choose` picks each next token from the
    /// step's logits. Returns the sequence (start marker included) and the
    /// logits of every generated step.
    pub fn decode_with<F>(&self, z: &LatentCode, max_len: usize, mut choose: F) -> Result<(TokenSequence, TokenLogits)>
    where
        F: FnMut(&Array1<f64>) -> usize,
    {
        self.check_latent(z)?;
        if max_len < 2 {
            return Err(Error::Domain("max_len must allow at least one generated token".into()));
        }
        let mut g = Graph::new();
        let zv = g.input(row_matrix(&z.0));
        let (mut h, mut c) = self.decoder_state(&mut g, zv);
        let mut tokens = vec![START];
        let mut rows: Vec<Array1<f64>> = Vec::new();
        while tokens.len() < max_len {
            let prev = *tokens.last().expect("nonempty");
            let (logits, h2, c2) = self.decoder_step(&mut g, zv, &[prev], h, c);
            h = h2;
            c = c2;
            let row = g.value(logits).row(0).to_owned();
            let mut next = choose(&row);
            // never emit the start marker or padding mid-sequence
            if next == START || next == PAD || next >= self.vocab_size {
                let mut masked = row.clone();
                masked[START] = f64::NEG_INFINITY;
                masked[PAD] = f64::NEG_INFINITY;
                next = argmax(masked.view());
            }
            rows.push(row);
            tokens.push(next);
            if next == END {
                break;
            }
        }
        let mut m = Array2::zeros((rows.len(), self.vocab_size));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        Ok((TokenSequence::from_raw(tokens), TokenLogits(m)))
    }

    pub fn reconstruct_image_encoding(&self, z: &LatentCode) -> Result<EncodedImage> {
        self.check_latent(z)?;
        let mut g = Graph::new();
        let zv = g.input(row_matrix(&z.0));
        let v = self.reconstruct_image_g(&mut g, zv);
        Ok(EncodedImage(g.value(v).row(0).to_owned()))
    }

    pub fn reconstruct_category_encoding(&self, z: &LatentCode) -> Result<EncodedCategory> {
        self.check_latent(z)?;
        let mut g = Graph::new();
        let zv = g.input(row_matrix(&z.0));
        let v = self.reconstruct_category_g(&mut g, zv);
        Ok(EncodedCategory(g.value(v).row(0).to_owned()))
    }

    pub fn classify_question(&self, question: QuestionInput<'_>) -> Result<CategoryDistribution> {
        let dists: Matrix = match question {
            QuestionInput::Logits(logits) => {
                if logits.0.nrows() == 0 {
                    return Err(Error::Domain("empty question".into()));
                }
                if logits.0.ncols() != self.vocab_size {
                    return Err(Error::Domain("logits width differs from vocabulary size".into()));
                }
                softmax_rows(&(&logits.0 / self.config.soft_temperature))
            }
            QuestionInput::Tokens(seq) => {
                let body = seq.body();
                if body.is_empty() {
                    return Err(Error::Domain("empty question".into()));
                }
                let mut m = Matrix::zeros((body.len(), self.vocab_size));
                for (t, &tok) in body.iter().enumerate() {
                    if tok >= self.vocab_size {
                        return Err(Error::Domain(format!("token {tok} out of vocabulary range")));
                    }
                    m[[t, tok]] = 1.0;
                }
                m
            }
        };
        let mut g = Graph::new();
        let steps: Vec<Var> = dists
            .axis_iter(Axis(0))
            .map(|row| g.input(row.to_owned().insert_axis(Axis(0))))
            .collect();
        let probs = self.classify_g(&mut g, &steps, &[steps.len()])?;
        Ok(CategoryDistribution(g.value(probs).row(0).to_owned()))
    }

    /// Posterior mean of the latent for a batch (noise-free path).
    pub fn latent_means(&self, images: &Matrix, categories: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new();
        let hi = self.encode_images_g(&mut g, images)?;
        let hc = self.encode_categories_g(&mut g, categories)?;
        let (mean, _) = self.fuse_g(&mut g, hi, hc);
        Ok(g.value(mean).clone())
    }

    /// Teacher-forced logits for a batch decoded from the given latents.
    pub fn teacher_logits(&self, z: &Matrix, teacher: &TeacherBatch) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let steps = self.decode_teacher_g(&mut g, zv, teacher)?;
        Ok(steps.iter().map(|&s| g.value(s).clone()).collect())
    }
}

/// `z = μ + σ ⊙ noise`.
pub fn sample_latent(dist: &LatentDistribution, noise: &Array1<f64>) -> Result<LatentCode> {
    if noise.len() != dist.dim() {
        return Err(Error::Domain(format!(
            "noise has {} entries, latent has {}",
            noise.len(),
            dist.dim()
        )));
    }
    Ok(LatentCode(&dist.mean + &(&dist.stddev * noise)))
}

pub(crate) fn row_matrix(v: &Array1<f64>) -> Matrix {
    v.clone().insert_axis(Axis(0))
}

fn stack_rows(g: &Graph, steps: &[Var]) -> TokenLogits {
    let cols = g.value(steps[0]).ncols();
    let mut m = Array2::zeros((steps.len(), cols));
    for (t, &s) in steps.iter().enumerate() {
        m.row_mut(t).assign(&g.value(s).row(0));
    }
    TokenLogits(m)
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
