use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use cmam::corpus::{self, EncodedSentence, Lines, Tokenizer, Vocabulary};
use cmam::embeddings::{self, EmbeddingMatrix, SkipGramConfig};
use cmam::evaluation::{self, GoldMapping};
use cmam::gradcheck::{self, GradCheckConfig};
use cmam::inference::{self, InferenceConfig, Prediction};
use cmam::model::{Checkpoint, CmamParams, DEFAULT_KERNEL_LENS};
use cmam::objective::{self, BatchLog, TrainConfig};
use cmam::synthdata::{self, SynthConfig};
use cmam::{Error, Result};

use crate::config::{self, Settings};
use crate::{
    AspectsArgs, Cli, Command, EmbedArgs, EvalArgs, GradcheckArgs, InferenceArgs, ModelInputs, PredictArgs, SynthArgs,
    TokenArgs, TrainArgs,
};

const DEFAULT_ASPECTS: usize = 30;
const DEFAULT_TOP_N: usize = 10;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let threads = settings.pick(cli.threads, "threads", 1usize)?;
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    match cli.command {
        Command::Embed(a) => embed(&a, &settings),
        Command::Train(a) => train(&a, &settings),
        Command::Predict(a) => predict(&a, &settings),
        Command::Eval(a) => eval(&a, &settings),
        Command::Synth(a) => synth(&a, &settings),
        Command::Gradcheck(a) => grad_check(&a, &settings),
        Command::Aspects(a) => aspects(&a, &settings),
    }
}

fn require_file(path: &Path) -> Result<()> {
    fs::metadata(path)
        .map_err(|e| Error::io(path, e))
        .and_then(|m| {
            if m.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!("{} is not a file", path.display())))
            }
        })
}

/// Fails early if `path` cannot be created, before any long computation.
fn require_writable(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        ));
    }
    Ok(())
}

fn tokenizer(args: &TokenArgs, settings: &Settings) -> Result<Tokenizer> {
    match settings.pick_opt(args.stopwords.clone(), "stopwords")? {
        Some(path) => Ok(Tokenizer::new(corpus::load_stopwords(&path)?, false)),
        None => Ok(Tokenizer::default()),
    }
}

fn embed(a: &EmbedArgs, s: &Settings) -> Result<ExitCode> {
    require_file(&a.corpus)?;
    require_writable(&a.out_embeddings)?;
    require_writable(&a.out_vocab)?;
    let defaults = SkipGramConfig::default();
    let cfg = SkipGramConfig {
        dim: s.pick(a.dim, "embed_dim", defaults.dim)?,
        window: s.pick(a.window, "embed_window", defaults.window)?,
        negatives: s.pick(a.negatives, "embed_negatives", defaults.negatives)?,
        epochs: s.pick(a.epochs, "embed_epochs", defaults.epochs)?,
        lr: s.pick(a.lr, "embed_lr", defaults.lr)?,
        seed: s.pick(a.seed, "seed", defaults.seed)?,
    };
    let max_vocab = s.pick(a.max_vocab, "max_vocab", corpus::DEFAULT_MAX_VOCAB)?;
    let min_count = s.pick(a.min_count, "min_count", corpus::DEFAULT_MIN_COUNT)?;
    let center = s.switch(a.center, "center", true, false)?;
    let tok = tokenizer(&a.tokens, s)?;

    let lines = corpus::read_token_lines(&a.corpus, &tok)?;
    let vocab = corpus::build_vocabulary(&lines, max_vocab, min_count)?;
    log::info!("vocabulary: {} entries, coverage {:.3}", vocab.len(), vocab.coverage(lines.iter().flatten().map(String::as_str)));
    let sentences: Vec<EncodedSentence> = lines.iter().map(|t| corpus::encode(t, &vocab)).collect();
    let mut matrix = embeddings::train_skipgram(&sentences, &vocab, &cfg)?;
    if center {
        matrix.center();
    }
    vocab.save(&a.out_vocab)?;
    matrix.save(&vocab, &a.out_embeddings)?;
    Ok(ExitCode::SUCCESS)
}

fn load_model_inputs(inputs: &ModelInputs, seed: u64) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let vocab = Vocabulary::load(&inputs.vocab)?;
    let loaded = embeddings::load_embeddings(&inputs.embeddings, &vocab, seed)?;
    if loaded.missing > 0 {
        log::warn!("{} vocabulary tokens have no vector; initialized at random", loaded.missing);
    }
    Ok((vocab, loaded.matrix))
}

fn train(a: &TrainArgs, s: &Settings) -> Result<ExitCode> {
    require_file(&a.corpus)?;
    require_file(&a.inputs.vocab)?;
    require_file(&a.inputs.embeddings)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: s.pick(a.epochs, "epochs", d.epochs)?,
        batch_size: s.pick(a.batch_size, "batch_size", d.batch_size)?,
        lr: s.pick(a.lr, "lr", d.lr)?,
        beta1: s.pick(a.beta1, "beta1", d.beta1)?,
        beta2: s.pick(a.beta2, "beta2", d.beta2)?,
        adam_eps: s.pick(a.adam_eps, "adam_eps", d.adam_eps)?,
        lambda: s.pick(a.lambda, "lambda", d.lambda)?,
        ortho_offset: s.pick(a.ortho_offset, "ortho_offset", d.ortho_offset)?,
        negatives_per_sample: s.pick(a.negatives, "negatives", d.negatives_per_sample)?,
        tlas_enabled: s.switch(a.no_tlas, "tlas", false, true)?,
        tlas_scale: 1.0,
        seed: s.pick(a.seed, "seed", d.seed)?,
    };
    cfg.validate()?;
    let k = s.pick(a.aspects, "aspects", DEFAULT_ASPECTS)?;
    let kernels = match s.pick_opt(a.kernels.clone(), "kernels")? {
        Some(text) => config::parse_list(&text)?,
        None => DEFAULT_KERNEL_LENS.to_vec(),
    };
    let min_len = s.pick(a.min_len, "min_len", corpus::DEFAULT_MIN_LEN)?;
    let tok = tokenizer(&a.tokens, s)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let (vocab, matrix) = load_model_inputs(&a.inputs, cfg.seed)?;
    let (sentences, _) = corpus::load_corpus_vec(&a.corpus, &tok, &vocab, min_len.max(1))?;
    let aem = embeddings::init_aspects(&matrix, k, cfg.seed)?;
    let params = CmamParams::init(aem, &kernels, cfg.seed)?;
    let fingerprint = vocab.fingerprint();
    let out = objective::train(&sentences, &matrix, params, &cfg, |epoch, p| {
        let ck = Checkpoint { params: p.clone(), vocab_fingerprint: fingerprint };
        ck.save(&a.out_dir.join(format!("epoch-{epoch}.ckpt")))
    })?;
    let mut csv = String::from(BatchLog::CSV_HEADER);
    csv.push('\n');
    for row in &out.log {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    let log_path = a.out_dir.join("loss.csv");
    fs::write(&log_path, csv).map_err(|e| Error::io(&log_path, e))?;
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary, matrix: &EmbeddingMatrix) -> Result<CmamParams> {
    let ck = Checkpoint::load(path)?;
    if ck.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::Config(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    if ck.params.dim != matrix.dim() {
        return Err(Error::Config(format!(
            "checkpoint dimension {} does not match embedding dimension {}",
            ck.params.dim,
            matrix.dim()
        )));
    }
    Ok(ck.params)
}

fn inference_config(a: &InferenceArgs, s: &Settings) -> Result<InferenceConfig> {
    let d = InferenceConfig::default();
    let cfg = InferenceConfig {
        q_as: s.pick(a.q_as, "q_as", d.q_as)?,
        n_as: s.pick(a.n_as, "n_as", d.n_as)?,
        q_at: s.pick(a.q_at, "q_at", d.q_at)?,
        n_at: s.pick(a.n_at, "n_at", d.n_at)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn predict(a: &PredictArgs, s: &Settings) -> Result<ExitCode> {
    require_file(&a.checkpoint)?;
    require_file(&a.inputs.vocab)?;
    require_file(&a.inputs.embeddings)?;
    require_file(&a.input)?;
    require_writable(&a.out)?;
    let cfg = inference_config(&a.inference, s)?;
    let tok = tokenizer(&a.tokens, s)?;
    let seed = s.pick(None, "seed", 1u64)?;
    let (vocab, matrix) = load_model_inputs(&a.inputs, seed)?;
    let params = load_checkpoint(&a.checkpoint, &vocab, &matrix)?;
    let mapping = a.mapping.as_deref().map(GoldMapping::load).transpose()?;
    if let Some(m) = &mapping {
        if m.len() != params.aspects {
            return Err(Error::Config(format!(
                "mapping has {} aspects but the model has {}",
                m.len(),
                params.aspects
            )));
        }
    }

    let mut predictions = Vec::new();
    for line in Lines::open(&a.input)? {
        let tokens = tok.tokenize(&line?);
        let mut p = if tokens.is_empty() {
            Prediction::default()
        } else {
            inference::predict(&corpus::encode(&tokens, &vocab), &matrix, &params, &cfg)?
        };
        if let Some(m) = &mapping {
            for asp in &mut p.aspects {
                asp.label = m.label(asp.id)?.map(str::to_owned);
            }
        }
        predictions.push(p);
    }
    evaluation::write_jsonl(&a.out, &predictions)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: &EvalArgs, s: &Settings) -> Result<ExitCode> {
    require_file(&a.predictions)?;
    require_file(&a.gold)?;
    require_file(&a.mapping)?;
    for p in a.out.iter().chain(&a.json) {
        require_writable(p)?;
    }
    let tok = tokenizer(&a.tokens, s)?;
    let predictions = evaluation::load_predictions(&a.predictions)?;
    let gold = evaluation::load_gold(&a.gold)?;
    let mapping = GoldMapping::load(&a.mapping)?;
    let report = evaluation::evaluate(&predictions, &gold, &mapping, &tok)?;
    let table = report.to_table();
    match &a.out {
        Some(path) => fs::write(path, &table).map_err(|e| Error::io(path, e))?,
        None => std::io::stdout()
            .write_all(table.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    if let Some(path) = &a.json {
        let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: &SynthArgs, s: &Settings) -> Result<ExitCode> {
    let seed = s.pick(a.seed, "seed", 1u64)?;
    let mut cfg = SynthConfig::restaurant_toy(seed);
    cfg.n_sentences = s.pick(a.sentences, "sentences", cfg.n_sentences)?;
    let out = synthdata::generate(&cfg)?;
    out.write(&a.out_dir, &cfg.topics)?;
    log::info!("wrote {} sentences to {}", out.sentences.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(a: &GradcheckArgs, s: &Settings) -> Result<ExitCode> {
    let d = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        instances: s.pick(a.instances, "instances", d.instances)?,
        step: s.pick(a.step, "step", d.step)?,
        tolerance: s.pick(a.tolerance, "tolerance", d.tolerance)?,
        seed: s.pick(a.seed, "seed", d.seed)?,
        ..d
    };
    if !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(Error::Config("step and tolerance must be positive".into()));
    }
    let report = gradcheck::run(&cfg)?;
    println!("instances: {}  tolerance: {:e}", report.instances, report.tolerance);
    for t in &report.worst {
        println!(
            "{:<2} worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            t.term, t.max_rel_error, t.worst_tensor, t.worst_index, t.analytic, t.numeric
        );
    }
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: {} of {} instances exceed the tolerance", report.failures, report.instances);
        Ok(ExitCode::from(4))
    }
}

fn aspects(a: &AspectsArgs, s: &Settings) -> Result<ExitCode> {
    require_file(&a.checkpoint)?;
    require_file(&a.inputs.vocab)?;
    require_file(&a.inputs.embeddings)?;
    if let Some(p) = &a.out {
        require_writable(p)?;
    }
    let top_n = s.pick(a.top_n, "top_n", DEFAULT_TOP_N)?;
    let seed = s.pick(None, "seed", 1u64)?;
    let (vocab, matrix) = load_model_inputs(&a.inputs, seed)?;
    let params = load_checkpoint(&a.checkpoint, &vocab, &matrix)?;
    let mapping = match &a.topics {
        Some(path) => {
            let topics: Vec<(String, Vec<String>)> = synthdata::load_topics(path)?
                .into_iter()
                .map(|t| (t.name, t.core_tokens))
                .collect();
            evaluation::overlap_mapping(&params.aem, &matrix, &vocab, &topics, top_n)
        }
        None => evaluation::draft_mapping(&params.aem, &matrix, &vocab, top_n),
    };
    let text = mapping.to_text();
    print!("{text}");
    if let Some(path) = &a.out {
        mapping.save(path)?;
    }
    Ok(ExitCode::SUCCESS)
}
