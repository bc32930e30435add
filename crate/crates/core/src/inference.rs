//! Question generation from an image and a target answer category.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, sample_latent, ImageTensor, LatentCode, Model, QuestionInput, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    /// `z = μ`, argmax tokens. Deterministic.
    Greedy,
    /// `z = μ + σ ε`, tokens drawn from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
}

/// Generate one question. The random stream depends only on `seed` and
/// `category`, so batch generation order does not matter.
pub fn generate(model: &Model, image: &ImageTensor, category: usize, mode: DecodeMode, seed: u64) -> Result<TokenSequence> {
    model.params().all_finite().map_err(Error::NonFiniteParams)?;
    let dist = model.fuse(&model.encode_image(image)?, &model.encode_category(category)?)?;
    let max_len = model.config().max_len;
    let seq = match mode {
        DecodeMode::Greedy => model.decode_with(&LatentCode(dist.mean), max_len, |row| argmax(row.view()))?.0,
        DecodeMode::Sample { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(category as u64);
            let noise = Array1::from_shape_simple_fn(dist.dim(), || StandardNormal.sample(&mut rng));
            let z = sample_latent(&dist, &noise)?;
            model
                .decode_with(&z, max_len, |row| sample_token(row, temperature, &mut rng))?
                .0
        }
    };
    Ok(seq)
}

/// One generation per category id `0..n_categories`.
pub fn generate_all(model: &Model, image: &ImageTensor, mode: DecodeMode, seed: u64) -> Result<BTreeMap<usize, TokenSequence>> {
    (0..model.n_categories())
        .map(|c| Ok((c, generate(model, image, c, mode, seed)?)))
        .collect()
}

fn sample_token(logits: &Array1<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights = logits.mapv(|x| ((x - max) / temperature).exp());
    let mut u = rng.random::<f64>() * weights.sum();
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Argmax of the category classifier on a discrete question.
pub fn predict_category(model: &Model, question: &TokenSequence) -> Result<usize> {
    Ok(model.classify_question(QuestionInput::Tokens(question))?.argmax())
}

/// One generated question with its ground-truth references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub image_id: u64,
    /// Category name.
    pub category: String,
    pub question: String,
    pub references: Vec<String>,
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blank lines are skipped; any other unparsable line is an error.
pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
