use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::categories::normalize_answer;
use super::{tokenize, CategoryMap, ImageRef, Sample};
use crate::error::{Error, Result};

/// Record counts from one [`load_vqa`] call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub questions: usize,
    pub annotations: usize,
    pub kept: usize,
    /// Majority answer absent from the category map.
    pub unmapped: usize,
    /// Records missing required fields or with no usable words.
    pub malformed: usize,
    /// Questions without an annotation record.
    pub unannotated: usize,
}

impl LoadReport {
    /// Kept samples over well-formed annotated questions.
    pub fn retention(&self) -> f64 {
        let denom = self.kept + self.unmapped;
        if denom == 0 {
            0.0
        } else {
            self.kept as f64 / denom as f64
        }
    }
}

/// Most frequent normalized answer; ties go to the lexicographically
/// smallest.
pub fn majority_answer<'a, I>(answers: I) -> Option<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        let a = normalize_answer(a);
        if !a.is_empty() {
            *counts.entry(a).or_default() += 1;
        }
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, n)| *n == best).map(|(a, _)| a)
}

/// Read VQA-schema question and annotation files and keep one sample per
/// question whose majority answer is in `categories`.
///
/// Image paths follow the COCO naming `COCO_<subtype>_<id:012>.jpg` when the
/// questions file carries `data_subtype`, else `<id:012>.jpg`.
pub fn load_vqa(annotations_path: &Path, questions_path: &Path, categories: &CategoryMap) -> Result<(Vec<Sample>, LoadReport)> {
    let annotations = read_json(annotations_path)?;
    let questions = read_json(questions_path)?;
    let mut report = LoadReport::default();

    let ann_list = records(&annotations, "annotations", annotations_path)?;
    report.annotations = ann_list.len();
    let mut answers_by_question: HashMap<u64, Option<String>> = HashMap::with_capacity(ann_list.len());
    for ann in ann_list {
        let Some(qid) = ann.get("question_id").and_then(Value::as_u64) else {
            report.malformed += 1;
            continue;
        };
        answers_by_question.insert(qid, annotation_answer(ann));
    }

    let subtype = questions.get("data_subtype").and_then(Value::as_str);
    let q_list = records(&questions, "questions", questions_path)?;
    report.questions = q_list.len();
    let mut samples = Vec::new();
    for q in q_list {
        let (Some(qid), Some(image_id), Some(text)) = (
            q.get("question_id").and_then(Value::as_u64),
            q.get("image_id").and_then(Value::as_u64),
            q.get("question").and_then(Value::as_str),
        ) else {
            report.malformed += 1;
            continue;
        };
        if tokenize(text).is_empty() {
            report.malformed += 1;
            continue;
        }
        let answer = match answers_by_question.get(&qid) {
            None => {
                report.unannotated += 1;
                continue;
            }
            Some(None) => {
                report.malformed += 1;
                continue;
            }
            Some(Some(a)) => a,
        };
        let Some(category) = categories.category_of(answer) else {
            report.unmapped += 1;
            continue;
        };
        let file = match subtype {
            Some(st) => format!("COCO_{st}_{image_id:012}.jpg"),
            None => format!("{image_id:012}.jpg"),
        };
        samples.push(Sample {
            image_id,
            image: ImageRef::Path(file),
            question: text.to_string(),
            category,
        });
    }
    report.kept = samples.len();
    if report.malformed > 0 {
        log::warn!("skipped {} malformed VQA records", report.malformed);
    }
    log::info!(
        "loaded {} of {} questions ({} unmapped answers)",
        report.kept,
        report.questions,
        report.unmapped
    );
    Ok((samples, report))
}

fn annotation_answer(ann: &Value) -> Option<String> {
    if let Some(list) = ann.get("answers").and_then(Value::as_array) {
        let texts: Option<Vec<&str>> = list.iter().map(|a| a.get("answer").and_then(Value::as_str)).collect();
        if let Some(m) = texts.and_then(majority_answer) {
            return Some(m);
        }
    }
    ann.get("multiple_choice_answer")
        .and_then(Value::as_str)
        .map(normalize_answer)
        .filter(|a| !a.is_empty())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn records<'a>(root: &'a Value, key: &str, path: &Path) -> Result<&'a Vec<Value>> {
    root.get(key).and_then(Value::as_array).ok_or_else(|| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("missing `{key}` array"),
    })
}
