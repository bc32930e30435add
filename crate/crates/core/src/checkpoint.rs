//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "CVQGCKPT"
//! version        u32      CHECKPOINT_VERSION
//! config hash    32 bytes SHA-256 of the `config` object of the metadata
//! metadata len   u64
//! metadata       UTF-8 JSON (configs, vocabulary, category names, counters)
//! tensor count   u32
//! per tensor     u32 name len, name, u32 rows, u32 cols, rows·cols f64
//! trailer        32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Tensors are, in order: every model parameter under its own name, the
//! Adam moments as `adam.m.<name>` and `adam.v.<name>`, `centers`, and
//! `history` (one row per completed step, columns as
//! [`LossBreakdown::to_array`]).

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::losses::{CenterBank, LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ModelParams;
use crate::training::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVQGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything that fixes the architecture and the optimization problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: RunConfig,
    vocab: Vocabulary,
    categories: Vec<String>,
    epoch: usize,
    step: u64,
    adam_steps: u64,
}

/// A training state together with what is needed to rebuild and use it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, train: TrainConfig, loss: LossWeights, vocab: Vocabulary, categories: Vec<String>) -> Self {
        Self {
            config: RunConfig {
                model: state.model.config().clone(),
                adam: state.adam.config,
                train,
                loss,
            },
            vocab,
            categories,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.state.model;
        if model.vocab_size() != self.vocab.len() || model.n_categories() != self.categories.len() {
            return Err(Error::Config("model dimensions disagree with vocabulary or category list".into()));
        }
        let config_json = serde_json::to_vec(&self.config)?;
        let meta = Metadata {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            categories: self.categories.clone(),
            epoch: self.state.epoch,
            step: self.state.step,
            adam_steps: self.state.adam.steps_taken(),
        };
        let meta_json = serde_json::to_vec(&meta)?;

        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        buf.extend_from_slice(&Sha256::digest(&config_json));
        buf.write_u64::<LittleEndian>(meta_json.len() as u64).expect("vec write");
        buf.extend_from_slice(&meta_json);

        let params = model.params();
        let history = history_matrix(&self.state.history);
        let mut tensors: Vec<(String, &Matrix)> = params.iter().map(|(n, m)| (n.to_string(), m)).collect();
        for (i, m) in self.state.adam.first_moments().iter().enumerate() {
            tensors.push((format!("adam.m.{}", params.name(i)), m));
        }
        for (i, v) in self.state.adam.second_moments().iter().enumerate() {
            tensors.push((format!("adam.v.{}", params.name(i)), v));
        }
        tensors.push(("centers".into(), &self.state.centers.centers));
        tensors.push(("history".into(), &history));

        buf.write_u32::<LittleEndian>(tensors.len() as u32).expect("vec write");
        for (name, m) in tensors {
            write_tensor(&mut buf, &name, m);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + 32 + 8 + 4 + 32 {
            return Err(corrupt("truncated header"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Cursor::new(&body[12..]);
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(|_| corrupt("truncated header"))?;
        let meta_len = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
        let mut meta_json = vec![0u8; meta_len.min(body.len())];
        r.read_exact(&mut meta_json).map_err(|_| corrupt("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&meta_json).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if Sha256::digest(serde_json::to_vec(&meta.config)?).as_slice() != hash {
            return Err(corrupt("config hash does not match metadata"));
        }

        let count = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated tensor table"))?;
        let mut tensors = Vec::with_capacity((count as usize).min(4096));
        for _ in 0..count {
            tensors.push(read_tensor(&mut r).ok_or_else(|| corrupt("truncated tensor"))?);
        }
        if r.position() as usize != body.len() - 12 {
            return Err(corrupt("trailing bytes after tensors"));
        }
        Self::assemble(meta, tensors).map_err(|e| match e {
            Error::Config(reason) => corrupt(&reason),
            other => other,
        })
    }

    fn assemble(meta: Metadata, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let Metadata {
            config,
            vocab,
            categories,
            epoch,
            step,
            adam_steps,
        } = meta;
        let layout = Model::layout(&config.model, vocab.len(), categories.len());
        let n = layout.specs().len();
        if tensors.len() != 3 * n + 2 {
            return Err(Error::Config(format!("expected {} tensors, found {}", 3 * n + 2, tensors.len())));
        }
        let mut it = tensors.into_iter();
        let named: Vec<(String, Matrix)> = it.by_ref().take(n).collect();
        let params = ModelParams::from_named(&layout, named)?;
        let mut moments = |prefix: &str| -> Result<Vec<Matrix>> {
            (0..n)
                .map(|i| {
                    let (name, m) = it.next().expect("counted");
                    if name != format!("{prefix}.{}", params.name(i)) {
                        return Err(Error::Config(format!("unexpected tensor `{name}`")));
                    }
                    Ok(m)
                })
                .collect()
        };
        let m = moments("adam.m")?;
        let v = moments("adam.v")?;
        let (cn, centers) = it.next().expect("counted");
        let (hn, history) = it.next().expect("counted");
        if cn != "centers" || hn != "history" {
            return Err(Error::Config("missing centers or history tensor".into()));
        }
        if centers.dim() != (categories.len(), config.model.latent_dim) {
            return Err(Error::Config("center bank shape mismatch".into()));
        }
        if history.nrows() as u64 != step || (step > 0 && history.ncols() != 7) {
            return Err(Error::Config("history does not cover every completed step".into()));
        }
        let history = history
            .rows()
            .into_iter()
            .map(|r| LossBreakdown::from_array(std::array::from_fn(|i| r[i])))
            .collect();
        let adam = Adam::from_state(config.adam, &params, m, v, adam_steps)?;
        let model = Model::from_params(config.model.clone(), vocab.len(), categories.len(), params)?;
        let mut bank = CenterBank::zeros(categories.len(), config.model.latent_dim, config.train.center_update_scale)?;
        bank.centers = centers;
        Ok(Self {
            config,
            vocab,
            categories,
            state: TrainState {
                model,
                adam,
                centers: bank,
                epoch,
                step,
                history,
            },
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn history_matrix(history: &[LossBreakdown]) -> Matrix {
    Matrix::from_shape_fn((history.len(), 7), |(r, c)| history[r].to_array()[c])
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, m: &Matrix) {
    buf.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
    buf.extend_from_slice(name.as_bytes());
    buf.write_u32::<LittleEndian>(m.nrows() as u32).expect("vec write");
    buf.write_u32::<LittleEndian>(m.ncols() as u32).expect("vec write");
    for &x in m.iter() {
        buf.write_f64::<LittleEndian>(x).expect("vec write");
    }
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Option<(String, Matrix)> {
    let remaining = |r: &Cursor<&[u8]>| r.get_ref().len() - r.position() as usize;
    let len = r.read_u32::<LittleEndian>().ok()? as usize;
    if len > remaining(r) {
        return None;
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).ok()?;
    let rows = r.read_u32::<LittleEndian>().ok()? as usize;
    let cols = r.read_u32::<LittleEndian>().ok()? as usize;
    if rows.checked_mul(cols)?.checked_mul(8)? > remaining(r) {
        return None;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>().ok()?);
    }
    Some((String::from_utf8(name).ok()?, Matrix::from_shape_vec((rows, cols), data).ok()?))
}
