//! Mapping learned aspects to gold labels and scoring predictions.
//!
//! Aspect extraction is scored per sentence and per label. Joint
//! (aspect, term) extraction counts a predicted pair as correct when its label
//! matches a gold pair and the predicted term shares at least one token with
//! the gold term. Examples with more than one scored gold pair are pooled
//! into a separate multi-label category.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Tokenizer, Vocabulary, UNK_ID};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::inference::Prediction;
use crate::linalg::{self, Matrix};

pub const OMITTED: &str = "omitted";
pub const MULTI_LABEL: &str = "Multi-labels";

/// Aspect id → gold label, with the words shown to whoever authored it.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldMapping {
    labels: Vec<String>,
    words: Vec<Vec<String>>,
}

impl GoldMapping {
    pub fn new(labels: Vec<String>) -> Self {
        let words = vec![Vec::new(); labels.len()];
        GoldMapping { labels, words }
    }

    pub fn with_words(labels: Vec<String>, words: Vec<Vec<String>>) -> Self {
        assert_eq!(labels.len(), words.len());
        GoldMapping { labels, words }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label of an aspect; `None` when the aspect is marked omitted.
    pub fn label(&self, aspect: usize) -> Result<Option<&str>> {
        let label = self
            .labels
            .get(aspect)
            .ok_or_else(|| Error::Invalid(format!("aspect {aspect} has no entry in the mapping")))?;
        Ok((label != OMITTED).then_some(label.as_str()))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Distinct non-omitted labels, sorted.
    pub fn scored_labels(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.labels.iter().filter(|l| *l != OMITTED).collect();
        set.into_iter().cloned().collect()
    }

    /// `aspect_id<TAB>label<TAB>words…` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, (label, words)) in self.labels.iter().zip(&self.words).enumerate() {
            let _ = writeln!(out, "{id}\t{label}\t{}", words.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<usize, (String, Vec<String>)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let id_field = fields.next().unwrap_or_default();
            let id: usize = id_field.trim().parse().map_err(|_| {
                Error::Format(format!("mapping line {}: bad aspect id {id_field:?}", lineno + 1))
            })?;
            let label = fields
                .next()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Format(format!("mapping line {}: missing label", lineno + 1)))?;
            let words = fields
                .next()
                .map(|w| w.split_whitespace().map(str::to_owned).collect())
                .unwrap_or_default();
            if entries.insert(id, (label.to_owned(), words)).is_some() {
                return Err(Error::Format(format!("aspect {id} is mapped more than once")));
            }
        }
        if let Some((missing, _)) = entries.keys().enumerate().find(|(i, id)| i != *id) {
            return Err(Error::Format(format!("aspect {missing} is missing from the mapping")));
        }
        let (labels, words) = entries.into_values().unzip();
        Ok(GoldMapping { labels, words })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GoldMapping::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldPair {
    pub label: String,
    pub term: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub pairs: Vec<GoldPair>,
}

pub fn load_gold(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        if ex.pairs.is_empty() {
            return Err(Error::Format(format!(
                "{} line {}: example has no gold pairs",
                path.display(),
                lineno + 1
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Regroups SemEval-2016 restaurant categories into the scored labels;
/// `None` for categories left out of scoring.
pub fn regroup_semeval_category(category: &str) -> Option<&'static str> {
    match category.to_ascii_uppercase().as_str() {
        "FOOD#QUALITY" | "FOOD#STYLE_OPTIONS" | "DRINKS#QUALITY" | "DRINKS#STYLE_OPTIONS" => Some("Food"),
        "SERVICE#GENERAL" => Some("Staff"),
        "AMBIENCE#GENERAL" => Some("Ambience"),
        _ => None,
    }
}

/// The `top_n` vocabulary tokens closest (by cosine) to an aspect vector.
pub fn representative_words(
    aspect: usize,
    aem: &Matrix,
    embeddings: &EmbeddingMatrix,
    vocab: &Vocabulary,
    top_n: usize,
) -> Vec<String> {
    let row = aem.row(aspect);
    let mut scored: Vec<(usize, f64)> = (0..embeddings.vocab_size())
        .filter(|&id| id != UNK_ID)
        .map(|id| (id, linalg::cosine(row, embeddings.row(id))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(top_n)
        .map(|(id, _)| vocab.token(id).to_owned())
        .collect()
}

/// Draft mapping for manual labeling: every aspect starts out omitted and
/// carries its representative words.
pub fn draft_mapping(aem: &Matrix, embeddings: &EmbeddingMatrix, vocab: &Vocabulary, top_n: usize) -> GoldMapping {
    let words: Vec<Vec<String>> = (0..aem.rows())
        .map(|k| representative_words(k, aem, embeddings, vocab, top_n))
        .collect();
    GoldMapping::with_words(vec![OMITTED.to_owned(); aem.rows()], words)
}

/// Maps each aspect to the topic whose core tokens overlap most with its
/// `top_n` representative words (ties to the earlier topic, no overlap → omitted).
pub fn overlap_mapping(
    aem: &Matrix,
    embeddings: &EmbeddingMatrix,
    vocab: &Vocabulary,
    topics: &[(String, Vec<String>)],
    top_n: usize,
) -> GoldMapping {
    let mut labels = Vec::with_capacity(aem.rows());
    let mut all_words = Vec::with_capacity(aem.rows());
    for k in 0..aem.rows() {
        let words = representative_words(k, aem, embeddings, vocab, top_n);
        let mut best: Option<(usize, usize)> = None;
        for (t, (_, core)) in topics.iter().enumerate() {
            let overlap = words.iter().filter(|w| core.contains(w)).count();
            if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
                best = Some((t, overlap));
            }
        }
        labels.push(best.map_or_else(|| OMITTED.to_owned(), |(t, _)| topics[t].0.clone()));
        all_words.push(words);
    }
    GoldMapping::with_words(labels, all_words)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Scores {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            counts: *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

fn check_aligned(predictions: &[Prediction], gold: &[LabeledExample]) -> Result<()> {
    if predictions.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Per-label aspect extraction counts, one decision per sentence and label.
pub fn score_aspects(
    predictions: &[Prediction],
    gold: &[LabeledExample],
    mapping: &GoldMapping,
) -> Result<BTreeMap<String, Counts>> {
    check_aligned(predictions, gold)?;
    let scored = mapping.scored_labels();
    let mut counts: BTreeMap<String, Counts> = scored.iter().map(|l| (l.clone(), Counts::default())).collect();
    for (pred, ex) in predictions.iter().zip(gold) {
        let gold_labels: HashSet<&str> = ex
            .pairs
            .iter()
            .map(|p| p.label.as_str())
            .filter(|l| counts.contains_key(*l))
            .collect();
        let mut predicted: HashSet<&str> = HashSet::new();
        for a in &pred.aspects {
            if let Some(l) = mapping.label(a.id)? {
                predicted.insert(l);
            }
        }
        if gold_labels.is_empty() {
            continue;
        }
        for label in &scored {
            let c = counts.get_mut(label).expect("initialized above");
            match (predicted.contains(label.as_str()), gold_labels.contains(label.as_str())) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCounts {
    pub per_category: BTreeMap<String, Counts>,
    pub micro: Counts,
}

/// Joint (aspect, term) counts under the partial-match rule. Each gold pair
/// is matched at most once, greedily by descending predicted aspect weight.
pub fn score_pairs(
    predictions: &[Prediction],
    gold: &[LabeledExample],
    mapping: &GoldMapping,
    tokenizer: &Tokenizer,
) -> Result<PairCounts> {
    check_aligned(predictions, gold)?;
    let scored: HashSet<String> = mapping.scored_labels().into_iter().collect();
    let mut per_category: BTreeMap<String, Counts> = scored.iter().map(|l| (l.clone(), Counts::default())).collect();
    per_category.insert(MULTI_LABEL.to_owned(), Counts::default());

    for (pred, ex) in predictions.iter().zip(gold) {
        let gold_pairs: Vec<(&str, HashSet<String>)> = ex
            .pairs
            .iter()
            .filter(|p| scored.contains(&p.label))
            .map(|p| (p.label.as_str(), tokenizer.tokenize(&p.term).into_iter().collect()))
            .collect();
        if gold_pairs.is_empty() {
            continue;
        }
        let multi = gold_pairs.len() > 1;

        let mut aspects: Vec<_> = pred.aspects.iter().collect();
        aspects.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        let mut matched = vec![false; gold_pairs.len()];
        let mut local: BTreeMap<&str, Counts> = BTreeMap::new();
        let mut seen: HashSet<(&str, Vec<&str>)> = HashSet::new();
        for a in aspects {
            let Some(label) = mapping.label(a.id)? else { continue };
            let tokens: HashSet<&str> = a.terms.iter().filter(|t| !t.oov).map(|t| t.token.as_str()).collect();
            let mut key: Vec<&str> = tokens.iter().copied().collect();
            key.sort_unstable();
            // A repeated (label, term) prediction can never claim a second gold pair.
            let fresh = seen.insert((label, key));
            let hit = gold_pairs.iter().enumerate().position(|(g, (gl, gt))| {
                fresh && !matched[g] && *gl == label && gt.iter().any(|t| tokens.contains(t.as_str()))
            });
            let entry = local.entry(if multi { MULTI_LABEL } else { label }).or_default();
            match hit {
                Some(g) => {
                    matched[g] = true;
                    entry.tp += 1;
                }
                None => entry.fp += 1,
            }
        }
        for (g, (label, _)) in gold_pairs.iter().enumerate() {
            if !matched[g] {
                local.entry(if multi { MULTI_LABEL } else { label }).or_default().fn_ += 1;
            }
        }
        for (cat, c) in local {
            per_category.entry(cat.to_owned()).or_default().merge(&c);
        }
    }
    let mut micro = Counts::default();
    per_category.values().for_each(|c| micro.merge(c));
    Ok(PairCounts { per_category, micro })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aspects: BTreeMap<String, Scores>,
    pub pairs: BTreeMap<String, Scores>,
    pub pair_micro: Scores,
}

pub fn evaluate(
    predictions: &[Prediction],
    gold: &[LabeledExample],
    mapping: &GoldMapping,
    tokenizer: &Tokenizer,
) -> Result<EvalReport> {
    let aspects = score_aspects(predictions, gold, mapping)?
        .into_iter()
        .map(|(l, c)| (l, c.scores()))
        .collect();
    let pc = score_pairs(predictions, gold, mapping, tokenizer)?;
    Ok(EvalReport {
        aspects,
        pairs: pc.per_category.into_iter().map(|(l, c)| (l, c.scores())).collect(),
        pair_micro: pc.micro.scores(),
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Aspect extraction");
        let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9}", "label", "precision", "recall", "f1");
        for (label, s) in &self.aspects {
            let _ = writeln!(out, "{:<14} {:>9.3} {:>9.3} {:>9.3}", label, s.precision, s.recall, s.f1);
        }
        let _ = writeln!(out, "\nAspect and term extraction");
        let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9}", "category", "precision", "recall", "f1");
        for (label, s) in &self.pairs {
            let _ = writeln!(out, "{:<14} {:>9.3} {:>9.3} {:>9.3}", label, s.precision, s.recall, s.f1);
        }
        let m = &self.pair_micro;
        let _ = writeln!(out, "{:<14} {:>9.3} {:>9.3} {:>9.3}", "micro-average", m.precision, m.recall, m.f1);
        out
    }
}
