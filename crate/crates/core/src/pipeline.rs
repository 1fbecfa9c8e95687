//! End-to-end runs on the synthetic corpus: generate, embed, train, predict, score.

use crate::corpus::{self, EncodedSentence, Tokenizer, Vocabulary};
use crate::embeddings::{self, EmbeddingMatrix, SkipGramConfig};
use crate::error::Result;
use crate::evaluation::{self, EvalReport, GoldMapping, LabeledExample};
use crate::inference::{self, InferenceConfig, Prediction};
use crate::model::{CmamParams, DEFAULT_KERNEL_LENS};
use crate::objective::{self, BatchLog, TrainConfig};
use crate::synthdata::{self, SynthConfig, TopicSpec};

/// Prepared data shared by several training runs.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub tokenizer: Tokenizer,
    pub vocab: Vocabulary,
    pub sentences: Vec<EncodedSentence>,
    pub gold: Vec<LabeledExample>,
    pub topics: Vec<TopicSpec>,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub skipgram: SkipGramConfig,
    /// Subtract the mean word vector after skip-gram training.
    pub center_embeddings: bool,
    pub aspects: usize,
    pub kernel_lens: Vec<usize>,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    /// Representative words inspected when mapping aspects to topics.
    pub mapping_top_n: usize,
}

impl ExperimentConfig {
    /// The restaurant-toy scenario: d=50, K=6, 5 epochs. The learning rate is
    /// raised to 0.005 because the corpus gives far fewer optimizer steps than
    /// a full review collection, and q_as=0.5 keeps the top three aspects as
    /// candidates, which is what q_as=0.9 yields with 30 aspects.
    pub fn restaurant_toy(seed: u64) -> Self {
        ExperimentConfig {
            synth: SynthConfig::restaurant_toy(seed),
            skipgram: SkipGramConfig {
                dim: 50,
                seed,
                ..SkipGramConfig::default()
            },
            center_embeddings: true,
            aspects: 6,
            kernel_lens: DEFAULT_KERNEL_LENS.to_vec(),
            train: TrainConfig {
                seed,
                lr: 0.005,
                ..TrainConfig::default()
            },
            inference: InferenceConfig {
                q_as: 0.5,
                ..InferenceConfig::default()
            },
            mapping_top_n: 10,
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let synth = synthdata::generate(&cfg.synth)?;
    let tokenizer = Tokenizer::default();
    let tokens: Vec<Vec<String>> = synth.sentences.iter().map(|s| tokenizer.tokenize(s)).collect();
    let vocab = corpus::build_vocabulary(&tokens, corpus::DEFAULT_MAX_VOCAB, corpus::DEFAULT_MIN_COUNT)?;
    let sentences: Vec<EncodedSentence> = tokens.iter().map(|t| corpus::encode(t, &vocab)).collect();
    let mut embeddings = embeddings::train_skipgram(&sentences, &vocab, &cfg.skipgram)?;
    if cfg.center_embeddings {
        embeddings.center();
    }
    Ok(PreparedCorpus {
        tokenizer,
        vocab,
        sentences,
        gold: synth.gold,
        topics: cfg.synth.topics.clone(),
        embeddings,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub params: CmamParams,
    pub log: Vec<BatchLog>,
    pub mapping: GoldMapping,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
}

pub fn initial_params(data: &PreparedCorpus, cfg: &ExperimentConfig) -> Result<CmamParams> {
    let aem = embeddings::init_aspects(&data.embeddings, cfg.aspects, cfg.train.seed)?;
    CmamParams::init(aem, &cfg.kernel_lens, cfg.train.seed)
}

pub fn train(data: &PreparedCorpus, cfg: &ExperimentConfig) -> Result<(CmamParams, Vec<BatchLog>)> {
    let params = initial_params(data, cfg)?;
    let train_set: Vec<EncodedSentence> = data
        .sentences
        .iter()
        .filter(|s| s.len() >= corpus::DEFAULT_MIN_LEN)
        .cloned()
        .collect();
    let out = objective::train(&train_set, &data.embeddings, params, &cfg.train, |_, _| Ok(()))?;
    Ok((out.params, out.log))
}

/// Maps aspects to topics by representative-word overlap, predicts on every
/// sentence and scores against the gold pairs.
pub fn evaluate(data: &PreparedCorpus, params: &CmamParams, cfg: &ExperimentConfig) -> Result<(GoldMapping, Vec<Prediction>, EvalReport)> {
    let topics: Vec<(String, Vec<String>)> = data
        .topics
        .iter()
        .map(|t| (t.name.clone(), t.core_tokens.clone()))
        .collect();
    let mapping = evaluation::overlap_mapping(&params.aem, &data.embeddings, &data.vocab, &topics, cfg.mapping_top_n);
    let mut predictions = Vec::with_capacity(data.sentences.len());
    for s in &data.sentences {
        let mut p = if s.is_empty() {
            Prediction::default()
        } else {
            inference::predict(s, &data.embeddings, params, &cfg.inference)?
        };
        for a in &mut p.aspects {
            a.label = mapping.label(a.id)?.map(str::to_owned);
        }
        predictions.push(p);
    }
    let report = evaluation::evaluate(&predictions, &data.gold, &mapping, &data.tokenizer)?;
    Ok((mapping, predictions, report))
}

pub fn run(data: &PreparedCorpus, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (params, log) = train(data, cfg)?;
    let (mapping, predictions, report) = evaluate(data, &params, cfg)?;
    Ok(ExperimentResult {
        params,
        log,
        mapping,
        predictions,
        report,
    })
}
