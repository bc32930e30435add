use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The answer categories named in the diversity tables.
pub const DEFAULT_CATEGORIES: [&str; 13] = [
    "count",
    "binary",
    "object",
    "color",
    "attribute",
    "materials",
    "spatial",
    "food",
    "shape",
    "location",
    "predicate",
    "time",
    "activity",
];

/// Answer string → category id, plus the category names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    names: Vec<String>,
    answers: BTreeMap<String, usize>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        Self::with_names(DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect())
    }
}

impl CategoryMap {
    /// Category names only, no answers mapped.
    pub fn with_names(names: Vec<String>) -> Self {
        Self {
            names,
            answers: BTreeMap::new(),
        }
    }

    /// Parse a two-column `answer<TAB>category` table on top of `self`'s
    /// names. Category names not yet known are appended in order of first
    /// appearance. Blank lines and `#` comments are skipped.
    pub fn extend_from_tsv(mut self, text: &str) -> Result<Self> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(answer), Some(category), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Config(format!(
                    "category map line {}: expected `answer<TAB>category`",
                    lineno + 1
                )));
            };
            let answer = normalize_answer(answer);
            let category = category.trim().to_lowercase();
            if answer.is_empty() || category.is_empty() {
                return Err(Error::Config(format!("category map line {}: empty field", lineno + 1)));
            }
            let id = match self.names.iter().position(|n| *n == category) {
                Some(i) => i,
                None => {
                    self.names.push(category);
                    self.names.len() - 1
                }
            };
            if let Some(prev) = self.answers.insert(answer.clone(), id) {
                if prev != id {
                    return Err(Error::Config(format!(
                        "category map line {}: answer `{answer}` mapped to two categories",
                        lineno + 1
                    )));
                }
            }
        }
        Ok(self)
    }

    /// Default names extended by the TSV at `path`.
    pub fn from_tsv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::default().extend_from_tsv(&text)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn category_of(&self, answer: &str) -> Option<usize> {
        self.answers.get(&normalize_answer(answer)).copied()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }
}

pub(crate) fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}
