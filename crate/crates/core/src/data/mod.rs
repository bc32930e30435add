//! Dataset ingestion: tokenization, vocabulary, answer-category maps, the
//! VQA JSON loader, deterministic splits, the procedural toy dataset and the
//! on-disk sample cache.

mod cache;
mod categories;
mod images;
mod split;
pub mod toy;
mod vocab;
mod vqa;

pub use cache::{read_cache, write_cache, CachedDataset, DataSource, Manifest, CACHE_FORMAT_VERSION};
pub use categories::{CategoryMap, DEFAULT_CATEGORIES};
pub use images::{ImageRef, ImageSource};
pub use split::{split, DatasetSplit};
pub use toy::{make_toy_dataset, ToyConfig, ToyDataset};
pub use vocab::Vocabulary;
pub use vqa::{load_vqa, majority_answer, LoadReport};

use serde::{Deserialize, Serialize};

/// One `<image, question, category>` training tuple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: u64,
    pub image: ImageRef,
    /// Raw question text; tokenized on use.
    pub question: String,
    pub category: usize,
}

/// Lowercase, drop apostrophes, turn any other non-alphanumeric character
/// into whitespace, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch == '\'' || ch == '’' {
            continue;
        }
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Tokens rejoined with single spaces; the canonical form used for
/// uniqueness checks and metric inputs.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}
