//! Review text ingestion: tokenization, vocabulary construction and sentence encoding.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "unknown";
pub const UNK_ID: usize = 0;
pub const DEFAULT_MAX_VOCAB: usize = 9000;
pub const DEFAULT_MIN_COUNT: u64 = 2;
pub const DEFAULT_MIN_LEN: usize = 2;

const ENGLISH_STOPWORDS: &str = include_str!("stopwords.txt");

pub fn english_stopwords() -> HashSet<String> {
    ENGLISH_STOPWORDS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Characters removed from tokens. Anything that is neither alphanumeric nor
/// whitespace counts as punctuation; interior occurrences split the token.
#[inline]
pub fn is_strip_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase, split on whitespace and punctuation, drop stop words.
pub fn tokenize(text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || is_strip_char(c))
        .filter(|t| !t.is_empty() && !stopwords.contains(*t))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    stopwords: HashSet<String>,
    drop_numerals: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            stopwords: english_stopwords(),
            drop_numerals: false,
        }
    }
}

impl Tokenizer {
    pub fn new(stopwords: HashSet<String>, drop_numerals: bool) -> Self {
        Tokenizer {
            stopwords,
            drop_numerals,
        }
    }

    pub fn stopwords(&self) -> &HashSet<String> {
        &self.stopwords
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = tokenize(text, &self.stopwords);
        if self.drop_numerals {
            tokens.retain(|t| !t.chars().all(|c| c.is_numeric()));
        }
        tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    freq: Vec<u64>,
}

impl Vocabulary {
    /// Builds from explicit `(token, count)` entries in id order, starting at id 1.
    /// `oov_count` becomes the frequency of the reserved unknown id.
    pub fn from_entries(entries: Vec<(String, u64)>, oov_count: u64) -> Result<Self> {
        let mut id_to_token = Vec::with_capacity(entries.len() + 1);
        let mut freq = Vec::with_capacity(entries.len() + 1);
        let mut token_to_id = HashMap::with_capacity(entries.len());
        id_to_token.push(UNKNOWN_TOKEN.to_owned());
        freq.push(oov_count);
        for (token, count) in entries {
            if token == UNKNOWN_TOKEN {
                return Err(Error::Format(format!(
                    "token {UNKNOWN_TOKEN:?} is reserved for id {UNK_ID}"
                )));
            }
            let id = id_to_token.len();
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {token:?}")));
            }
            id_to_token.push(token);
            freq.push(count);
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        // The unknown entry is always present.
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Fraction of in-vocabulary tokens in a token stream.
    pub fn coverage<'a, I>(&self, tokens: I) -> f64
    where
        I: IntoIterator<Item = &'a str>,
    {
        let (mut hit, mut total) = (0u64, 0u64);
        for t in tokens {
            total += 1;
            if self.token_to_id.contains_key(t) {
                hit += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Serializes to the `token\tid\tcount` line format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, (tok, count)) in self.id_to_token.iter().zip(&self.freq).enumerate() {
            out.push_str(&format!("{tok}\t{id}\t{count}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut oov = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "vocabulary line {}: expected 3 tab-separated fields",
                    lineno + 1
                )));
            }
            let id: usize = fields[1].parse().map_err(|_| {
                Error::Format(format!("vocabulary line {}: bad id {:?}", lineno + 1, fields[1]))
            })?;
            let count: u64 = fields[2].parse().map_err(|_| {
                Error::Format(format!("vocabulary line {}: bad count {:?}", lineno + 1, fields[2]))
            })?;
            if id == UNK_ID {
                if fields[0] != UNKNOWN_TOKEN {
                    return Err(Error::Format(format!("id 0 must be {UNKNOWN_TOKEN:?}")));
                }
                oov = Some(count);
            } else {
                if id != entries.len() + 1 || oov.is_none() {
                    return Err(Error::Format(format!(
                        "vocabulary line {}: ids must be sorted and contiguous from 0",
                        lineno + 1
                    )));
                }
                entries.push((fields[0].to_owned(), count));
            }
        }
        let oov = oov.ok_or_else(|| Error::Format("vocabulary file is empty".into()))?;
        Vocabulary::from_entries(entries, oov)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary; pins checkpoints to their vocabulary.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Keeps the `max_vocab - 1` most frequent tokens with count ≥ `min_count`.
/// Ids are assigned by descending frequency, ties broken lexicographically.
pub fn build_vocabulary<I, S>(corpus: I, max_vocab: usize, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    if max_vocab < 1 {
        return Err(Error::Config("max_vocab must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for sentence in corpus {
        for tok in sentence.as_ref() {
            total += 1;
            *counts.entry(tok.clone()).or_default() += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus("corpus contains no tokens".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && t != UNKNOWN_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - 1);
    let kept: u64 = ranked.iter().map(|(_, c)| c).sum();
    Vocabulary::from_entries(ranked, total - kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub raw_tokens: Vec<String>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode(tokens: &[String], vocab: &Vocabulary) -> EncodedSentence {
    EncodedSentence {
        ids: tokens.iter().map(|t| vocab.id(t)).collect(),
        raw_tokens: tokens.to_vec(),
    }
}

pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).to_owned()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub kept: usize,
    pub dropped_short: usize,
    pub invalid_utf8: usize,
}

/// Line reader that skips (and counts) lines that are not valid UTF-8.
pub struct Lines {
    path: PathBuf,
    reader: BufReader<File>,
    buf: Vec<u8>,
    invalid: usize,
}

impl Lines {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Lines {
            path: path.to_owned(),
            reader: BufReader::new(file),
            buf: Vec::new(),
            invalid: 0,
        })
    }

    pub fn invalid_utf8(&self) -> usize {
        self.invalid
    }
}

impl Iterator for Lines {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    while matches!(self.buf.last(), Some(b'\n') | Some(b'\r')) {
                        self.buf.pop();
                    }
                    match std::str::from_utf8(&self.buf) {
                        Ok(s) => return Some(Ok(s.to_owned())),
                        Err(_) => {
                            self.invalid += 1;
                            log::warn!("{}: skipping line that is not valid UTF-8", self.path.display());
                        }
                    }
                }
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
        }
    }
}

/// Tokenized lines of a corpus file, for vocabulary building.
pub fn read_token_lines(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for line in Lines::open(path)? {
        let tokens = tokenizer.tokenize(&line?);
        if !tokens.is_empty() {
            out.push(tokens);
        }
    }
    Ok(out)
}

/// Streams encoded sentences from a line-per-sentence file in file order.
pub struct CorpusReader<'a> {
    lines: Lines,
    tokenizer: &'a Tokenizer,
    vocab: &'a Vocabulary,
    min_len: usize,
    stats: LoadStats,
}

impl CorpusReader<'_> {
    pub fn stats(&self) -> LoadStats {
        LoadStats {
            invalid_utf8: self.lines.invalid_utf8(),
            ..self.stats
        }
    }
}

impl Iterator for CorpusReader<'_> {
    type Item = Result<EncodedSentence>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            if line.trim().is_empty() {
                continue;
            }
            self.stats.lines += 1;
            let tokens = self.tokenizer.tokenize(&line);
            if tokens.len() < self.min_len {
                self.stats.dropped_short += 1;
                continue;
            }
            self.stats.kept += 1;
            return Some(Ok(encode(&tokens, self.vocab)));
        }
    }
}

pub fn load_corpus<'a>(
    path: &Path,
    tokenizer: &'a Tokenizer,
    vocab: &'a Vocabulary,
    min_len: usize,
) -> Result<CorpusReader<'a>> {
    Ok(CorpusReader {
        lines: Lines::open(path)?,
        tokenizer,
        vocab,
        min_len,
        stats: LoadStats::default(),
    })
}

/// Loads the whole corpus into memory, logging the load statistics.
pub fn load_corpus_vec(
    path: &Path,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    min_len: usize,
) -> Result<(Vec<EncodedSentence>, LoadStats)> {
    let mut reader = load_corpus(path, tokenizer, vocab, min_len)?;
    let sentences = reader.by_ref().collect::<Result<Vec<_>>>()?;
    let stats = reader.stats();
    log::info!(
        "{}: {} sentences kept, {} shorter than {} tokens dropped, {} invalid UTF-8 lines skipped",
        path.display(),
        stats.kept,
        stats.dropped_short,
        min_len,
        stats.invalid_utf8
    );
    Ok((sentences, stats))
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
