//! Convolutional multi-attention model: forward pass and exact gradients.
//!
//! For a sentence `S` (N×d), a bank of F convolutions over token positions
//! produces K attention channels. Each channel weights the sentence into an
//! aspect-specific vector; their mean drives a sigmoid aspect head, and the
//! renormalized aspect probabilities mix the aspect matrix into a
//! reconstruction of the sentence.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedSentence;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, sigmoid, Matrix};

pub const DEFAULT_KERNEL_LENS: [usize; 3] = [1, 3, 5];

/// One convolution of the attention bank. Weights are laid out `[offset][dim][aspect]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub len: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Kernel {
    pub fn zeros(len: usize, dim: usize, aspects: usize) -> Self {
        Kernel {
            len,
            weights: vec![0.0; len * dim * aspects],
            bias: vec![0.0; aspects],
        }
    }

    #[inline]
    pub fn index(&self, offset: usize, d: usize, k: usize, dim: usize, aspects: usize) -> usize {
        debug_assert!(offset < self.len && d < dim && k < aspects);
        (offset * dim + d) * aspects + k
    }
}

/// Learnable parameters. The same shape doubles as a gradient record.
#[derive(Debug, Clone, PartialEq)]
pub struct CmamParams {
    pub dim: usize,
    pub aspects: usize,
    pub kernels: Vec<Kernel>,
    /// K×d aspect head weights.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// K×d aspect embedding matrix.
    pub aem: Matrix,
}

pub type ParamGrads = CmamParams;

impl CmamParams {
    pub fn zeros(dim: usize, aspects: usize, kernel_lens: &[usize]) -> Self {
        CmamParams {
            dim,
            aspects,
            kernels: kernel_lens.iter().map(|&l| Kernel::zeros(l, dim, aspects)).collect(),
            head_w: Matrix::zeros(aspects, dim),
            head_b: vec![0.0; aspects],
            aem: Matrix::zeros(aspects, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CmamParams::zeros(self.dim, self.aspects, &self.kernel_lens())
    }

    /// Fan-scaled uniform kernels, zero biases and head, and the given aspect matrix.
    pub fn init(aem: Matrix, kernel_lens: &[usize], seed: u64) -> Result<Self> {
        let (aspects, dim) = (aem.rows(), aem.cols());
        let mut params = CmamParams::zeros(dim, aspects, kernel_lens);
        params.aem = aem;
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kernel in &mut params.kernels {
            let bound = (6.0 / (kernel.len * dim + aspects) as f64).sqrt();
            for w in &mut kernel.weights {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn kernel_lens(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::Config("at least one convolution kernel is required".into()));
        }
        if self.aspects == 0 || self.dim == 0 {
            return Err(Error::Config("aspect count and dimension must be positive".into()));
        }
        for k in &self.kernels {
            if k.len % 2 == 0 {
                return Err(Error::Config(format!("kernel length {} is not odd", k.len)));
            }
            if k.weights.len() != k.len * self.dim * self.aspects || k.bias.len() != self.aspects {
                return Err(Error::Format("kernel tensor has the wrong shape".into()));
            }
        }
        if (self.head_w.rows(), self.head_w.cols()) != (self.aspects, self.dim)
            || (self.aem.rows(), self.aem.cols()) != (self.aspects, self.dim)
            || self.head_b.len() != self.aspects
        {
            return Err(Error::Format("head or aspect matrix has the wrong shape".into()));
        }
        if let Some((name, _)) = self.tensors().into_iter().find(|(_, t)| !t.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("parameter {name} has non-finite entries")));
        }
        Ok(())
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.kernels.len() + 3);
        for (f, k) in self.kernels.iter().enumerate() {
            out.push((format!("kernel{f}.weight"), k.weights.as_slice()));
            out.push((format!("kernel{f}.bias"), k.bias.as_slice()));
        }
        out.push(("head_w".into(), self.head_w.as_slice()));
        out.push(("head_b".into(), self.head_b.as_slice()));
        out.push(("aem".into(), self.aem.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(2 * self.kernels.len() + 3);
        for (f, k) in self.kernels.iter_mut().enumerate() {
            out.push((format!("kernel{f}.weight"), k.weights.as_mut_slice()));
            out.push((format!("kernel{f}.bias"), k.bias.as_mut_slice()));
        }
        out.push(("head_w".into(), self.head_w.as_mut_slice()));
        out.push(("head_b".into(), self.head_b.as_mut_slice()));
        out.push(("aem".into(), self.aem.as_mut_slice()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CmamParams, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            linalg::axpy(dst, scale, src);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    /// N×d word embeddings of the sentence.
    pub sentence: Matrix,
    /// N×K attention logits, the mean of the convolution outputs.
    pub attention_logits: Matrix,
    /// N×K attention, sigmoid of the logits.
    pub attention: Matrix,
    /// K×d attention-weighted sentence vectors, one per aspect.
    pub aspect_sentences: Matrix,
    /// Mean of `aspect_sentences` rows.
    pub sentence_repr: Vec<f64>,
    /// K aspect probabilities.
    pub probs: Vec<f64>,
    /// Reconstruction of the sentence from the aspect matrix.
    pub reconstruction: Vec<f64>,
    /// Mean word embedding of the sentence (reconstruction target).
    pub target: Vec<f64>,
}

/// Sum of the F "same"-padded convolutions divided by F, and its sigmoid.
pub fn conv_attention(sentence: &Matrix, params: &CmamParams) -> Result<(Matrix, Matrix)> {
    let (n, d, k) = (sentence.rows(), params.dim, params.aspects);
    if n == 0 {
        return Err(Error::Invalid("cannot attend over an empty sentence".into()));
    }
    if sentence.cols() != d {
        return Err(Error::Invalid(format!("sentence width {} != model dim {d}", sentence.cols())));
    }
    if !sentence.is_finite() {
        return Err(Error::Numeric("sentence embeddings contain non-finite values".into()));
    }
    let mut logits = Matrix::zeros(n, k);
    for kernel in &params.kernels {
        let half = kernel.len / 2;
        for i in 0..n {
            let out = logits.row_mut(i);
            linalg::axpy(out, 1.0, &kernel.bias);
            for o in 0..kernel.len {
                let Some(pos) = (i + o).checked_sub(half).filter(|&p| p < n) else {
                    continue;
                };
                let row = sentence.row(pos);
                for (c, &s) in row.iter().enumerate() {
                    let base = (o * d + c) * k;
                    linalg::axpy(out, s, &kernel.weights[base..base + k]);
                }
            }
        }
    }
    let inv_f = 1.0 / params.kernels.len() as f64;
    logits.as_mut_slice().iter_mut().for_each(|v| *v *= inv_f);
    let mut attention = logits.clone();
    attention.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok((logits, attention))
}

/// Row j is `Σ_i A[i,j] · S[i,:]`.
pub fn aspect_sentences(attention: &Matrix, sentence: &Matrix) -> Matrix {
    let (n, k, d) = (sentence.rows(), attention.cols(), sentence.cols());
    assert_eq!(attention.rows(), n, "attention and sentence lengths differ");
    let mut out = Matrix::zeros(k, d);
    for i in 0..n {
        let s = sentence.row(i);
        for j in 0..k {
            linalg::axpy(out.row_mut(j), attention.get(i, j), s);
        }
    }
    out
}

pub fn average_sentence(aspect_sentences: &Matrix) -> Vec<f64> {
    let k = aspect_sentences.rows();
    assert!(k >= 1, "need at least one aspect");
    let mut mean = vec![0.0; aspect_sentences.cols()];
    for row in aspect_sentences.iter_rows() {
        linalg::axpy(&mut mean, 1.0, row);
    }
    mean.iter_mut().for_each(|v| *v /= k as f64);
    mean
}

pub fn aspect_probs(sentence_repr: &[f64], params: &CmamParams) -> Vec<f64> {
    (0..params.aspects)
        .map(|k| sigmoid(linalg::dot(params.head_w.row(k), sentence_repr) + params.head_b[k]))
        .collect()
}

/// `Σ_k p̂_k · aem[k]` with `p̂ = p / Σp`.
pub fn reconstruct(probs: &[f64], aem: &Matrix) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    assert!(total > 0.0, "aspect probabilities must have a positive sum");
    let mut out = vec![0.0; aem.cols()];
    for (k, &p) in probs.iter().enumerate() {
        linalg::axpy(&mut out, p / total, aem.row(k));
    }
    out
}

/// Forward pass on an explicit N×d sentence matrix.
pub fn forward_matrix(sentence: Matrix, params: &CmamParams) -> Result<ForwardState> {
    let (attention_logits, attention) = conv_attention(&sentence, params)?;
    let aspect_sentences = aspect_sentences(&attention, &sentence);
    let sentence_repr = average_sentence(&aspect_sentences);
    let probs = aspect_probs(&sentence_repr, params);
    let reconstruction = reconstruct(&probs, &params.aem);
    let target = average_sentence(&sentence);
    Ok(ForwardState {
        sentence,
        attention_logits,
        attention,
        aspect_sentences,
        sentence_repr,
        probs,
        reconstruction,
        target,
    })
}

pub fn forward(sentence: &EncodedSentence, embeddings: &EmbeddingMatrix, params: &CmamParams) -> Result<ForwardState> {
    if sentence.is_empty() {
        return Err(Error::Invalid("cannot run the model on an empty sentence".into()));
    }
    if embeddings.dim() != params.dim {
        return Err(Error::Invalid(format!(
            "embedding dim {} != model dim {}",
            embeddings.dim(),
            params.dim
        )));
    }
    forward_matrix(embeddings.lookup(&sentence.ids), params)
}

/// Loss gradients with respect to the forward-state quantities the losses read.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGrads {
    pub reconstruction: Vec<f64>,
    pub aspect_sentences: Matrix,
    pub probs: Vec<f64>,
    /// Direct gradient on the aspect matrix (orthogonality and TLAS terms).
    pub aem: Matrix,
}

impl UpstreamGrads {
    pub fn zeros(dim: usize, aspects: usize) -> Self {
        UpstreamGrads {
            reconstruction: vec![0.0; dim],
            aspect_sentences: Matrix::zeros(aspects, dim),
            probs: vec![0.0; aspects],
            aem: Matrix::zeros(aspects, dim),
        }
    }
}

/// Intermediate gradients, exposed for inspection in tests.
#[derive(Debug, Clone)]
pub struct BackwardTrace {
    pub attention: Matrix,
    pub attention_logits: Matrix,
}

/// Backpropagates `upstream` through the forward pass to every parameter.
/// Word embeddings are frozen and receive no gradient.
pub fn gradients(state: &ForwardState, params: &CmamParams, upstream: &UpstreamGrads) -> ParamGrads {
    gradients_traced(state, params, upstream).0
}

pub fn gradients_traced(
    state: &ForwardState,
    params: &CmamParams,
    upstream: &UpstreamGrads,
) -> (ParamGrads, BackwardTrace) {
    let (n, d, k) = (state.sentence.rows(), params.dim, params.aspects);
    let mut grads = params.zeros_like();
    grads.aem.add_scaled(&upstream.aem, 1.0);

    // Reconstruction: RS = Σ p̂_k aem_k, p̂ = p / Σp.
    let total: f64 = state.probs.iter().sum();
    let p_hat: Vec<f64> = state.probs.iter().map(|p| p / total).collect();
    let d_phat: Vec<f64> = (0..k)
        .map(|j| linalg::dot(&upstream.reconstruction, params.aem.row(j)))
        .collect();
    for j in 0..k {
        linalg::axpy(grads.aem.row_mut(j), p_hat[j], &upstream.reconstruction);
    }
    let weighted: f64 = d_phat.iter().zip(&p_hat).map(|(g, p)| g * p).sum();
    let d_probs: Vec<f64> = (0..k)
        .map(|j| (d_phat[j] - weighted) / total + upstream.probs[j])
        .collect();

    // Head: p = σ(z), z = W·AS + b.
    let mut d_repr = vec![0.0; d];
    for j in 0..k {
        let p = state.probs[j];
        let dz = d_probs[j] * p * (1.0 - p);
        linalg::axpy(grads.head_w.row_mut(j), dz, &state.sentence_repr);
        grads.head_b[j] += dz;
        linalg::axpy(&mut d_repr, dz, params.head_w.row(j));
    }

    // Mean over aspects, then AS_j = Σ_i A[i,j] S_i.
    let mut d_as = upstream.aspect_sentences.clone();
    for j in 0..k {
        linalg::axpy(d_as.row_mut(j), 1.0 / k as f64, &d_repr);
    }
    let mut d_attention = Matrix::zeros(n, k);
    for i in 0..n {
        let s = state.sentence.row(i);
        for j in 0..k {
            d_attention.set(i, j, linalg::dot(d_as.row(j), s));
        }
    }
    let mut d_logits = d_attention.clone();
    for (g, a) in d_logits.as_mut_slice().iter_mut().zip(state.attention.as_slice()) {
        *g *= a * (1.0 - a);
    }

    // Convolution bank, averaged over F.
    let inv_f = 1.0 / params.kernels.len() as f64;
    for (kernel, gk) in params.kernels.iter().zip(grads.kernels.iter_mut()) {
        let half = kernel.len / 2;
        for i in 0..n {
            let g_row = d_logits.row(i);
            linalg::axpy(&mut gk.bias, inv_f, g_row);
            for o in 0..kernel.len {
                let Some(pos) = (i + o).checked_sub(half).filter(|&p| p < n) else {
                    continue;
                };
                for (c, &s) in state.sentence.row(pos).iter().enumerate() {
                    let base = (o * d + c) * k;
                    linalg::axpy(&mut gk.weights[base..base + k], inv_f * s, g_row);
                }
            }
        }
    }

    (
        grads,
        BackwardTrace {
            attention: d_attention,
            attention_logits: d_logits,
        },
    )
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMAMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with the fingerprint of its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CmamParams,
    pub vocab_fingerprint: [u8; 32],
}

impl Checkpoint {
    /// Little-endian binary container:
    /// magic, version, d, K, F, kernel lengths, vocabulary SHA-256, then every
    /// tensor in [`CmamParams::tensors`] order as raw f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + 8 * p.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [p.dim, p.aspects, p.kernels.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for k in &p.kernels {
            out.extend_from_slice(&(k.len as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.vocab_fingerprint);
        for (_, t) in p.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dim = read_u64(&mut r)? as usize;
        let aspects = read_u64(&mut r)? as usize;
        let f = read_u64(&mut r)? as usize;
        if f > 1024 || dim > 1 << 20 || aspects > 1 << 20 {
            return Err(Error::Format("implausible checkpoint header".into()));
        }
        let lens = (0..f).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if lens.iter().any(|&l| l > 1 << 16) {
            return Err(Error::Format("implausible kernel length".into()));
        }
        let mut vocab_fingerprint = [0u8; 32];
        read_exact(&mut r, &mut vocab_fingerprint)?;
        let mut params = CmamParams::zeros(dim, aspects, &lens);
        for (_, t) in params.tensors_mut() {
            for v in t.iter_mut() {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        params.validate()?;
        Ok(Checkpoint {
            params,
            vocab_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
