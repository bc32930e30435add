use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved special tokens at the front of every vocabulary.
pub const N_SPECIALS: usize = 4;

/// Dense image input in CHW order. Precomputed feature vectors use
/// `channels = dim, height = width = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Array1<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Array1<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "image data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: Array1::zeros(channels * height * width),
        }
    }

    pub fn features(values: Array1<f64>) -> Self {
        Self {
            channels: values.len(),
            height: 1,
            width: 1,
            data: values,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Image embedding produced by the image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage(pub Array1<f64>);

/// Category embedding produced by the category encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCategory(pub Array1<f64>);

/// `[image ∥ category]`, the input of the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatEncoding(pub Array1<f64>);

impl ConcatEncoding {
    pub fn new(image: &EncodedImage, category: &EncodedCategory) -> Self {
        let mut v = Vec::with_capacity(image.0.len() + category.0.len());
        v.extend(image.0.iter());
        v.extend(category.0.iter());
        Self(Array1::from(v))
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Array1<f64>,
    pub stddev: Array1<f64>,
}

impl LatentDistribution {
    pub fn new(mean: Array1<f64>, stddev: Array1<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::Domain(format!(
                "mean has {} entries but stddev has {}",
                mean.len(),
                stddev.len()
            )));
        }
        if stddev.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("stddev entries must be strictly positive".into()));
        }
        Ok(Self { mean, stddev })
    }

    /// From the fusion head's raw `(mean, log-variance)` output.
    pub fn from_logvar(mean: Array1<f64>, logvar: &Array1<f64>) -> Self {
        let stddev = logvar.mapv(|lv| (0.5 * lv).exp());
        Self { mean, stddev }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Array1<f64>);

/// Start-marked token ids, optionally followed by padding after the end marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.first() != Some(&START) {
            return Err(Error::Domain("token sequence must begin with the start marker".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Domain(format!(
                "token {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        if tokens[1..].contains(&START) {
            return Err(Error::Domain("start marker may only appear at position 0".into()));
        }
        if let Some(end) = tokens.iter().position(|&t| t == END) {
            if tokens[end + 1..].iter().any(|&t| t != PAD) {
                return Err(Error::Domain("only padding may follow the end marker".into()));
            }
        }
        Ok(Self(tokens))
    }

    pub(crate) fn from_raw(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens after the start marker with trailing padding removed.
    pub fn body(&self) -> &[usize] {
        let mut end = self.0.len();
        while end > 1 && self.0[end - 1] == PAD {
            end -= 1;
        }
        &self.0[1.min(end)..end]
    }

    pub fn ends_with_end_marker(&self) -> bool {
        self.body().last() == Some(&END)
    }
}

/// Per-step unnormalized vocabulary scores, `T × V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits(pub Array2<f64>);

impl TokenLogits {
    pub fn steps(&self) -> usize {
        self.0.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution(pub Array1<f64>);

impl CategoryDistribution {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}
