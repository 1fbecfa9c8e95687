//! Synthetic multi-topic review corpora with planted aspect vocabularies.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::write_lines;
use crate::error::{Error, Result};
use crate::evaluation::{write_jsonl, GoldPair, LabeledExample};

#[derive(Debug, Clone, PartialEq)]
pub struct TopicSpec {
    pub name: String,
    pub core_tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub topics: Vec<TopicSpec>,
    /// Shared filler vocabulary, drawn with Zipf(`zipf_exponent`) frequencies.
    pub filler_tokens: Vec<String>,
    /// `mix[i]` is the probability that a sentence covers `i + 1` topics.
    pub mix: Vec<f64>,
    pub n_sentences: usize,
    /// Inclusive sentence length range in tokens.
    pub len_range: (usize, usize),
    /// Inclusive range of core tokens drawn per chosen topic.
    pub core_per_topic: (usize, usize),
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Three topics (food, staff, ambience) × 30 core tokens, a 500-token
    /// filler pool, 10k sentences, 30% of them covering two topics.
    pub fn restaurant_toy(seed: u64) -> Self {
        let topic = |name: &str| TopicSpec {
            name: name.to_owned(),
            core_tokens: (0..30).map(|i| format!("{name}{i:02}")).collect(),
        };
        SynthConfig {
            topics: vec![topic("food"), topic("staff"), topic("ambience")],
            filler_tokens: (0..500).map(|i| format!("filler{i:03}")).collect(),
            mix: vec![0.7, 0.3],
            n_sentences: 10_000,
            len_range: (4, 8),
            core_per_topic: (2, 3),
            zipf_exponent: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics.is_empty() || self.topics.iter().any(|t| t.core_tokens.is_empty()) {
            return Err(Error::Config("at least one topic with core tokens is required".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.topics {
            for tok in &t.core_tokens {
                if !seen.insert(tok.as_str()) {
                    return Err(Error::Config(format!("core token {tok:?} belongs to two topics")));
                }
            }
        }
        if self.mix.is_empty() || self.mix.len() > self.topics.len() || self.mix.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("topic-count mix must have 1..=#topics non-negative entries".into()));
        }
        let (lo, hi) = self.len_range;
        let (clo, chi) = self.core_per_topic;
        if lo == 0 || lo > hi || clo == 0 || clo > chi {
            return Err(Error::Config("invalid sentence length or core-token range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub sentences: Vec<String>,
    pub gold: Vec<LabeledExample>,
}

impl SynthCorpus {
    /// Writes `corpus.txt`, `gold.jsonl` and `topics.tsv` into `dir`.
    pub fn write(&self, dir: &Path, topics: &[TopicSpec]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("corpus.txt"), &self.sentences)?;
        write_jsonl(&dir.join("gold.jsonl"), &self.gold)?;
        write_topics(&dir.join("topics.tsv"), topics)
    }
}

/// `name<TAB>core tokens…` per line.
pub fn write_topics(path: &Path, topics: &[TopicSpec]) -> Result<()> {
    let mut out = String::new();
    for t in topics {
        let _ = writeln!(out, "{}\t{}", t.name, t.core_tokens.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_topics(path: &Path) -> Result<Vec<TopicSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (name, tokens) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("topics line {l:?} lacks a tab")))?;
            Ok(TopicSpec {
                name: name.to_owned(),
                core_tokens: tokens.split_whitespace().map(str::to_owned).collect(),
            })
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mix = WeightedIndex::new(&cfg.mix).map_err(|e| Error::Config(format!("topic-count mix: {e}")))?;
    let filler = if cfg.filler_tokens.is_empty() {
        None
    } else {
        let weights: Vec<f64> = (1..=cfg.filler_tokens.len())
            .map(|r| (r as f64).powf(-cfg.zipf_exponent))
            .collect();
        Some(WeightedIndex::new(&weights).expect("positive Zipf weights"))
    };

    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    let mut gold = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let n_topics = mix.sample(&mut rng) + 1;
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.topics.len(), n_topics).into_vec();
        chosen.sort_unstable();
        let mut len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);

        // (topic slot or None for filler, token)
        let mut slots: Vec<(Option<usize>, String)> = Vec::with_capacity(len);
        for (slot, &t) in chosen.iter().enumerate() {
            let core = &cfg.topics[t].core_tokens;
            for _ in 0..rng.random_range(cfg.core_per_topic.0..=cfg.core_per_topic.1) {
                slots.push((Some(slot), core[rng.random_range(0..core.len())].clone()));
            }
        }
        len = len.max(slots.len());
        while slots.len() < len {
            match &filler {
                Some(dist) => slots.push((None, cfg.filler_tokens[dist.sample(&mut rng)].clone())),
                None => {
                    let slot = rng.random_range(0..chosen.len());
                    let core = &cfg.topics[chosen[slot]].core_tokens;
                    slots.push((Some(slot), core[rng.random_range(0..core.len())].clone()));
                }
            }
        }
        slots.shuffle(&mut rng);

        let pairs = chosen
            .iter()
            .enumerate()
            .map(|(slot, &t)| GoldPair {
                label: cfg.topics[t].name.clone(),
                term: slots
                    .iter()
                    .filter(|(s, _)| *s == Some(slot))
                    .map(|(_, tok)| tok.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            })
            .collect();
        let text = slots.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" ");
        gold.push(LabeledExample {
            text: text.clone(),
            pairs,
        });
        sentences.push(text);
    }
    Ok(SynthCorpus { sentences, gold })
}
