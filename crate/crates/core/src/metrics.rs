//! Text-similarity and diversity metrics over generated questions.
//!
//! Every metric tokenizes with [`crate::data::tokenize`], so scoring is
//! case-insensitive and ignores punctuation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{normalize, tokenize};
use crate::error::{Error, Result};
use crate::inference::GenerationRecord;

type Counts = HashMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts {
    let mut counts = Counts::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_default() += 1;
    }
    counts
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return Err(Error::Domain(format!("BLEU order must be in 1..=4, got {n}")));
    }
    Ok(())
}

/// Clipped n-gram matches and candidate n-gram total for one sentence.
fn clipped(cand: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut max_ref = Counts::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(k);
        }
    }
    let matched = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, c.values().sum())
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let n = matched.len() as f64;
    let mut log_sum = 0.0;
    for (&m, &t) in matched.iter().zip(totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln() / n;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

fn tokenize_refs<S: AsRef<str>>(references: &[S]) -> Vec<Vec<String>> {
    references.iter().map(|r| tokenize(r.as_ref())).collect()
}

/// Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions with
/// uniform weights, times the brevity penalty `min(1, e^{1 − r/c})`.
/// No smoothing: any zero precision gives 0.
pub fn bleu_n<S: AsRef<str>>(candidate: &str, references: &[S], n: usize) -> Result<f64> {
    check_order(n)?;
    let cand = tokenize(candidate);
    let refs = tokenize_refs(references);
    let (matched, totals): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped(&cand, &refs, k)).unzip();
    Ok(bleu_from_counts(&matched, &totals, cand.len(), closest_ref_len(cand.len(), &refs)))
}

/// Corpus BLEU-n: clipped counts and lengths are summed over all pairs
/// before the precisions and brevity penalty are formed.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(&str, &[S])], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c_len, mut r_len) = (0, 0);
    for (candidate, references) in pairs {
        let cand = tokenize(candidate);
        let refs = tokenize_refs(references);
        for k in 1..=n {
            let (m, t) = clipped(&cand, &refs, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), &refs);
    }
    Ok(bleu_from_counts(&matched, &totals, c_len, r_len))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1 + β²)PR / (R + β²P)`, maximized over references.
pub fn rouge_l<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Domain("ROUGE-L needs at least one reference".into()));
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut best: f64 = 0.0;
    for r in tokenize_refs(references) {
        let l = lcs_len(&cand, &r);
        if l == 0 {
            continue;
        }
        let p = l as f64 / cand.len() as f64;
        let rec = l as f64 / r.len() as f64;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    Ok(best)
}

/// Greedy exact-match unigram alignment. A candidate word prefers the
/// reference slot right after the previous match, so runs stay contiguous.
/// Returns `(matches, chunks)`.
fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut last: Option<(usize, usize)> = None;
    for (i, w) in cand.iter().enumerate() {
        let next = last.map(|(_, r)| r + 1).filter(|&r| r < reference.len() && !used[r] && reference[r] == *w);
        let slot = next.or_else(|| (0..reference.len()).find(|&r| !used[r] && reference[r] == *w));
        let Some(r) = slot else { continue };
        used[r] = true;
        matches += 1;
        if last != Some((i.wrapping_sub(1), r.wrapping_sub(1))) {
            chunks += 1;
        }
        last = Some((i, r));
    }
    (matches, chunks)
}

/// Exact-match METEOR without stemming or synonyms:
/// `F = 10PR / (R + 9P)`, penalty `0.5 (chunks / matches)³`, score
/// `F (1 − penalty)`, maximized over references.
pub fn meteor_simplified<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Domain("METEOR needs at least one reference".into()));
    }
    let cand = tokenize(candidate);
    let mut best: f64 = 0.0;
    for r in tokenize_refs(references) {
        let (m, chunks) = align(&cand, &r);
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f = 10.0 * p * rec / (rec + 9.0 * p);
        let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
        best = best.max(f * (1.0 - penalty));
    }
    Ok(best)
}

/// CIDEr scale factor.
pub const CIDER_SCALE: f64 = 10.0;

/// Corpus CIDEr: per n = 1..4, cosine between tf-idf n-gram vectors of the
/// candidate and each reference, averaged over references and then over n,
/// times [`CIDER_SCALE`]; the corpus score is the mean over pairs. Document
/// frequencies count the pairs whose references contain an n-gram, with
/// `idf = ln N − ln max(1, df)`. An order where both vectors vanish because
/// every n-gram has zero idf is scored on raw counts instead.
pub fn cider<S: AsRef<str>>(pairs: &[(&str, &[S])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("CIDEr needs a nonempty corpus".into()));
    }
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|(_, r)| tokenize_refs(r)).collect();
    let mut df: [HashMap<Vec<String>, usize>; 4] = Default::default();
    for rs in &refs {
        for (k, table) in df.iter_mut().enumerate() {
            let mut seen = HashSet::new();
            for r in rs {
                seen.extend(ngrams(r, k + 1).into_keys());
            }
            for g in seen {
                *table.entry(g).or_default() += 1;
            }
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    for (cand, rs) in cands.iter().zip(&refs) {
        if rs.is_empty() {
            return Err(Error::Domain("CIDEr needs at least one reference per candidate".into()));
        }
        let mut score = 0.0;
        for (k, table) in df.iter().enumerate() {
            let idf = |g: &Vec<String>| log_n - (table.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let c = ngrams(cand, k + 1);
            let mut sum = 0.0;
            for r in rs {
                let r = ngrams(r, k + 1);
                let weighted = cosine(&c, &r, &idf);
                sum += weighted.unwrap_or_else(|| cosine(&c, &r, &|_| 1.0).unwrap_or(0.0));
            }
            score += sum / rs.len() as f64 / 4.0;
        }
        total += CIDER_SCALE * score;
    }
    Ok(total / pairs.len() as f64)
}

/// Weighted cosine; `None` when both vectors vanish.
fn cosine(a: &Counts, b: &Counts, weight: &dyn Fn(&Vec<String>) -> f64) -> Option<f64> {
    let vec = |c: &Counts| -> HashMap<Vec<String>, f64> { c.iter().map(|(g, &k)| (g.clone(), k as f64 * weight(g))).collect() };
    let (va, vb) = (vec(a), vec(b));
    let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&va), norm(&vb));
    if na == 0.0 && nb == 0.0 {
        return None;
    }
    if na == 0.0 || nb == 0.0 {
        return Some(0.0);
    }
    let dot: f64 = va.iter().map(|(g, x)| x * vb.get(g).copied().unwrap_or(0.0)).sum();
    Some(dot / (na * nb))
}

/// `100 · |unique(G)| / |G|` over normalized question text.
pub fn strength<S: AsRef<str>>(generations: &[S]) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::Domain("strength needs at least one generation".into()));
    }
    let unique: HashSet<String> = generations.iter().map(|g| normalize(g.as_ref())).collect();
    Ok(100.0 * unique.len() as f64 / generations.len() as f64)
}

/// Denominator of [`inventiveness`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InventivenessBase {
    /// All generations, duplicates included.
    #[default]
    Total,
    /// Distinct generations only.
    Unique,
}

/// `100 · |unique(G) \ Train| / base`, over normalized question text.
pub fn inventiveness<S: AsRef<str>, T: AsRef<str>>(
    generations: &[S],
    training_questions: &[T],
    base: InventivenessBase,
) -> Result<f64> {
    let train: HashSet<String> = training_questions.iter().map(|q| normalize(q.as_ref())).collect();
    inventiveness_against(generations, &train, base)
}

fn inventiveness_against<S: AsRef<str>>(generations: &[S], train: &HashSet<String>, base: InventivenessBase) -> Result<f64> {
    if generations.is_empty() {
        return Err(Error::Domain("inventiveness needs at least one generation".into()));
    }
    let unique: HashSet<String> = generations.iter().map(|g| normalize(g.as_ref())).collect();
    let unseen = unique.iter().filter(|g| !train.contains(*g)).count();
    let denom = match base {
        InventivenessBase::Total => generations.len(),
        InventivenessBase::Unique => unique.len(),
    };
    Ok(100.0 * unseen as f64 / denom as f64)
}

/// Reference-based scores, each ×100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    /// Records with at least one reference.
    pub scored: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub strength: f64,
    pub inventiveness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    /// `None` when no record carries references.
    pub similarity: Option<SimilarityScores>,
    pub strength: f64,
    pub inventiveness: f64,
    pub inventiveness_base: InventivenessBase,
    /// In order of first appearance.
    pub per_category: Vec<CategoryRow>,
}

/// Corpus BLEU and CIDEr, mean sentence METEOR and ROUGE-L, plus pooled and
/// per-category strength and inventiveness.
pub fn evaluate<T: AsRef<str>>(
    records: &[GenerationRecord],
    training_questions: &[T],
    base: InventivenessBase,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Domain("nothing to evaluate".into()));
    }
    let train: HashSet<String> = training_questions.iter().map(|q| normalize(q.as_ref())).collect();

    let with_refs: Vec<(&str, &[String])> = records
        .iter()
        .filter(|r| !r.references.is_empty())
        .map(|r| (r.question.as_str(), r.references.as_slice()))
        .collect();
    let similarity = if with_refs.is_empty() {
        None
    } else {
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = 100.0 * corpus_bleu(&with_refs, n + 1)?;
        }
        let mut meteor = 0.0;
        let mut rouge = 0.0;
        for (c, r) in &with_refs {
            meteor += meteor_simplified(c, r)?;
            rouge += rouge_l(c, r)?;
        }
        let k = with_refs.len() as f64;
        Some(SimilarityScores {
            scored: with_refs.len(),
            bleu,
            meteor: 100.0 * meteor / k,
            rouge_l: 100.0 * rouge / k,
            cider: 100.0 * cider(&with_refs)?,
        })
    };

    let all: Vec<&str> = records.iter().map(|r| r.question.as_str()).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.category.as_str()).or_default();
        if g.is_empty() {
            order.push(r.category.as_str());
        }
        g.push(r.question.as_str());
    }
    let per_category = order
        .into_iter()
        .map(|c| {
            let qs = &groups[c];
            Ok(CategoryRow {
                category: c.to_string(),
                count: qs.len(),
                strength: strength(qs)?,
                inventiveness: inventiveness_against(qs, &train, base)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricReport {
        records: records.len(),
        similarity,
        strength: strength(&all)?,
        inventiveness: inventiveness_against(&all, &train, base)?,
        inventiveness_base: base,
        per_category,
    })
}

impl MetricReport {
    /// Plain-text rendering: similarity scores, then one strength and
    /// inventiveness row per category and an overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.similarity {
            out.push_str(&format!("{:<10} {:>8}\n", "metric", "score"));
            for (n, b) in s.bleu.iter().enumerate() {
                out.push_str(&format!("{:<10} {:>8.2}\n", format!("BLEU-{}", n + 1), b));
            }
            out.push_str(&format!("{:<10} {:>8.2}\n", "METEOR", s.meteor));
            out.push_str(&format!("{:<10} {:>8.2}\n", "CIDEr", s.cider));
            out.push_str(&format!("{:<10} {:>8.2}\n", "ROUGE-L", s.rouge_l));
            out.push('\n');
        }
        let width = self
            .per_category
            .iter()
            .map(|r| r.category.len())
            .chain([10])
            .max()
            .unwrap_or(10);
        out.push_str(&format!(
            "{:<width$} {:>7} {:>9} {:>14}\n",
            "category", "count", "strength", "inventiveness"
        ));
        for r in &self.per_category {
            out.push_str(&format!(
                "{:<width$} {:>7} {:>9.2} {:>14.2}\n",
                r.category, r.count, r.strength, r.inventiveness
            ));
        }
        out.push_str(&format!(
            "{:<width$} {:>7} {:>9.2} {:>14.2}\n",
            "overall", self.records, self.strength, self.inventiveness
        ));
        out
    }
}
