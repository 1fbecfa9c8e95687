//! Word vectors: skip-gram with negative sampling, word2vec text I/O, and
//! k-means initialization of the aspect matrix.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{EncodedSentence, Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Word vectors, one row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub Matrix);

impl EmbeddingMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Numeric("embedding matrix contains non-finite values".into()));
        }
        Ok(EmbeddingMatrix(values))
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.0.row(id)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    /// Gathers the rows for a token-id sequence into an N×d matrix.
    pub fn lookup(&self, ids: &[usize]) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(id));
        }
        out
    }

    /// Mean of the embedding rows of a sentence.
    pub fn mean_of(&self, ids: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for &id in ids {
            linalg::axpy(&mut acc, 1.0, self.row(id));
        }
        let n = ids.len().max(1) as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }

    /// Subtracts the mean of the known-word rows (every row but the unknown
    /// token's) from all rows, removing the direction shared by every word.
    pub fn center(&mut self) {
        let known: Vec<usize> = (1..self.vocab_size()).collect();
        if known.is_empty() {
            return;
        }
        let mean = self.mean_of(&known);
        for id in 0..self.vocab_size() {
            linalg::axpy(self.0.row_mut(id), -1.0, &mean);
        }
    }

    /// Writes word2vec text format: a `V d` header, then `token v1 … vd` per row.
    /// Floats use the shortest representation that parses back to the same value.
    pub fn save(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        if vocab.len() != self.vocab_size() {
            return Err(Error::Invalid(format!(
                "vocabulary has {} entries but the matrix has {} rows",
                vocab.len(),
                self.vocab_size()
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.vocab_size(), self.dim()).map_err(io)?;
        for id in 0..self.vocab_size() {
            write!(w, "{}", vocab.token(id)).map_err(io)?;
            for v in self.row(id) {
                write!(w, " {v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedEmbeddings {
    pub matrix: EmbeddingMatrix,
    /// Vocabulary tokens absent from the file, initialized at random.
    pub missing: usize,
}

/// Reads word2vec text vectors and aligns them to `vocab`. Tokens missing from the
/// file get uniform values in [−0.05, 0.05] drawn from `seed`.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<LoadedEmbeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty embedding file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (rows, dim) = match parts.as_slice() {
        [r, d] => (
            r.parse::<usize>().map_err(|_| Error::Format(format!("bad header {header:?}")))?,
            d.parse::<usize>().map_err(|_| Error::Format(format!("bad header {header:?}")))?,
        ),
        _ => return Err(Error::Format(format!("bad header {header:?}, expected \"V d\""))),
    };
    if dim == 0 {
        return Err(Error::Format("embedding dimension must be positive".into()));
    }
    let mut values = Matrix::zeros(vocab.len(), dim);
    let mut seen = vec![false; vocab.len()];
    let mut read = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let vec: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: unparsable value", lineno + 2)))?;
        if vec.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {dim} values, found {}",
                lineno + 2,
                vec.len()
            )));
        }
        read += 1;
        if let Some(id) = vocab.get(token).or((token == vocab.token(UNK_ID)).then_some(UNK_ID)) {
            values.row_mut(id).copy_from_slice(&vec);
            seen[id] = true;
        }
    }
    if read != rows {
        return Err(Error::Format(format!("header declares {rows} rows, file has {read}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missing = 0;
    for (id, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        missing += 1;
        for v in values.row_mut(id) {
            *v = rng.random_range(-0.05..=0.05);
        }
    }
    if missing > 0 {
        log::info!("{missing} vocabulary tokens missing from {}; initialized at random", path.display());
    }
    Ok(LoadedEmbeddings {
        matrix: EmbeddingMatrix::new(values)?,
        missing,
    })
}

#[derive(Debug, Clone)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 200,
            window: 10,
            negatives: 20,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

/// All (center, context) position pairs within `window`, in scan order.
pub fn context_pairs(len: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for center in 0..len {
        let lo = center.saturating_sub(window);
        let hi = (center + window).min(len.saturating_sub(1));
        for ctx in lo..=hi {
            if ctx != center {
                pairs.push((center, ctx));
            }
        }
    }
    pairs
}

/// Draws negative word ids with probability proportional to count^0.75.
/// The unknown id is never drawn.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    dist: WeightedIndex<f64>,
    weights: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(freqs: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = freqs
            .iter()
            .enumerate()
            .map(|(id, &c)| if id == UNK_ID { 0.0 } else { (c as f64).powf(0.75) })
            .collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|_| Error::EmptyCorpus("no in-vocabulary tokens to sample negatives from".into()))?;
        Ok(NegativeSampler { dist, weights })
    }

    /// The sampling distribution, normalized to sum to one.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Trains skip-gram vectors with negative sampling and linearly decaying SGD.
/// Returns the input-vector matrix. Single-threaded and deterministic for a seed.
pub fn train_skipgram(
    corpus: &[EncodedSentence],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
) -> Result<EmbeddingMatrix> {
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(Error::Config("skip-gram dim and window must be positive".into()));
    }
    let total_tokens: usize = corpus
        .iter()
        .map(|s| s.ids.iter().filter(|&&i| i != UNK_ID).count())
        .sum();
    if total_tokens == 0 {
        return Err(Error::EmptyCorpus("skip-gram corpus has no in-vocabulary tokens".into()));
    }
    let sampler = NegativeSampler::new(vocab.freqs())?;
    let v = vocab.len();
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = Matrix::zeros(v, d);
    for x in input.as_mut_slice() {
        *x = (rng.random::<f64>() - 0.5) / d as f64;
    }
    let mut output = Matrix::zeros(v, d);
    let mut grad_in = vec![0.0; d];

    let planned = (total_tokens * cfg.epochs) as f64 + 1.0;
    let mut processed = 0usize;
    for epoch in 0..cfg.epochs {
        for sentence in corpus {
            let ids: Vec<usize> = sentence.ids.iter().copied().filter(|&i| i != UNK_ID).collect();
            let pairs = context_pairs(ids.len(), cfg.window);
            let mut pair_idx = 0;
            for center in 0..ids.len() {
                let lr = cfg.lr * (1.0 - processed as f64 / planned).max(1e-4);
                processed += 1;
                let w = ids[center];
                grad_in.fill(0.0);
                while pair_idx < pairs.len() && pairs[pair_idx].0 == center {
                    let ctx = ids[pairs[pair_idx].1];
                    pair_idx += 1;
                    for n in 0..=cfg.negatives {
                        let (target, label) = if n == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = sampler.sample(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let f = linalg::dot(input.row(w), output.row(target));
                        let g = (label - linalg::sigmoid(f)) * lr;
                        linalg::axpy(&mut grad_in, g, output.row(target));
                        let in_row = input.row(w).to_vec();
                        linalg::axpy(output.row_mut(target), g, &in_row);
                    }
                }
                linalg::axpy(input.row_mut(w), 1.0, &grad_in);
            }
        }
        log::debug!("skip-gram epoch {} done", epoch + 1);
    }
    EmbeddingMatrix::new(input)
}

/// Result of k-means clustering.
#[derive(Debug, Clone)]
pub struct AspectInit {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    /// Number of times an empty cluster was re-seeded.
    pub reseeds: usize,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let dist = linalg::squared_distance(point, row);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| linalg::squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in min_dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, md) in min_dist.iter_mut().enumerate() {
            *md = md.min(linalg::squared_distance(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding and squared Euclidean distance.
/// An empty cluster is re-seeded with the point farthest from its centroid.
pub fn kmeans(points: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<AspectInit> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    if n < k {
        return Err(Error::Invalid(format!("k-means needs at least {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut reseeds = 0;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        let nearest_all: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(points.row(i), &centroids))
            .collect();
        let mut next: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        let mut dist: Vec<f64> = nearest_all.iter().map(|&(_, d)| d).collect();

        let mut sizes = vec![0usize; k];
        next.iter().for_each(|&c| sizes[c] += 1);
        let mut reseeded = false;
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far = None;
            for i in 0..n {
                if sizes[next[i]] > 1 && far.is_none_or(|(_, d)| dist[i] > d) {
                    far = Some((i, dist[i]));
                }
            }
            let (i, _) = far.expect("n >= k guarantees a cluster with two members");
            sizes[next[i]] -= 1;
            sizes[c] = 1;
            next[i] = c;
            dist[i] = 0.0;
            centroids.row_mut(c).copy_from_slice(points.row(i));
            reseeds += 1;
            reseeded = true;
        }

        if !reseeded && next == assignments {
            break;
        }
        assignments = next;
        iterations += 1;

        let mut sums = Matrix::zeros(k, points.cols());
        for (i, &c) in assignments.iter().enumerate() {
            linalg::axpy(sums.row_mut(c), 1.0, points.row(i));
        }
        for c in 0..k {
            let inv = 1.0 / sizes[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
        let inertia: f64 = assignments
            .iter()
            .enumerate()
            .map(|(i, &c)| linalg::squared_distance(points.row(i), centroids.row(c)))
            .sum();
        history.push(inertia);
    }

    let inertia = *history.last().expect("at least one iteration runs");
    Ok(AspectInit {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        reseeds,
        iterations,
    })
}

pub const DEFAULT_KMEANS_ITERS: usize = 100;

/// Aspect matrix initialized with L2-normalized k-means centroids of the
/// word vectors (the unknown row is excluded).
pub fn init_aspects(embeddings: &EmbeddingMatrix, k: usize, seed: u64) -> Result<Matrix> {
    let values = embeddings.values();
    let rows: Vec<f64> = values.as_slice()[values.cols()..].to_vec();
    let points = Matrix::from_vec(values.rows() - 1, values.cols(), rows);
    let init = kmeans(&points, k, DEFAULT_KMEANS_ITERS, seed)?;
    let mut aem = init.centroids;
    for c in 0..k {
        let row = aem.row_mut(c);
        let nrm = linalg::norm(row);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::Numeric(format!("k-means centroid {c} cannot be normalized")));
        }
        row.iter_mut().for_each(|v| *v /= nrm);
    }
    Ok(aem)
}
