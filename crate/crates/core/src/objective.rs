//! Training objective: hinge reconstruction loss, offset orthogonality penalty,
//! triplet-like aspect spreading, plus negative sampling, Adam and the
//! epoch/batch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedSentence;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{self, CmamParams, ForwardState, ParamGrads, UpstreamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub h: f64,
    pub u: f64,
    pub t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(h: f64, u: f64, t: f64) -> Self {
        LossBreakdown { h, u, t, total: h + u + t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Orthogonality weight λ.
    pub lambda: f64,
    /// Orthogonality offset s.
    pub ortho_offset: f64,
    pub negatives_per_sample: usize,
    pub tlas_enabled: bool,
    /// Multiplier on the TLAS term when enabled. Only 0 and 1 are meaningful;
    /// 0 computes the term and discards it.
    pub tlas_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.5,
            ortho_offset: 0.3,
            negatives_per_sample: 20,
            tlas_enabled: true,
            tlas_scale: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.ortho_offset >= 0.0) {
            return Err(Error::Config("orthogonality offset must be non-negative".into()));
        }
        if self.negatives_per_sample < 1 {
            return Err(Error::Config("at least one negative per sample is required".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// `Σ_i max(0, 1 − RS·ts + RS·n_i)`.
pub fn hinge_loss(reconstruction: &[f64], target: &[f64], negatives: &[Vec<f64>]) -> f64 {
    let pos = linalg::dot(reconstruction, target);
    negatives
        .iter()
        .map(|n| (1.0 - pos + linalg::dot(reconstruction, n)).max(0.0))
        .sum()
}

/// Hinge loss and its gradient with respect to the reconstruction.
pub fn hinge_loss_grad(reconstruction: &[f64], target: &[f64], negatives: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let pos = linalg::dot(reconstruction, target);
    let mut grad = vec![0.0; reconstruction.len()];
    let mut loss = 0.0;
    for n in negatives {
        let margin = 1.0 - pos + linalg::dot(reconstruction, n);
        if margin > 0.0 {
            loss += margin;
            linalg::axpy(&mut grad, 1.0, n);
            linalg::axpy(&mut grad, -1.0, target);
        }
    }
    (loss, grad)
}

/// Gram matrix of the row-normalized aspect matrix, with the normalized rows.
fn normalized_gram(aem: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let k = aem.rows();
    let mut unit = aem.clone();
    let mut norms = Vec::with_capacity(k);
    for j in 0..k {
        let nrm = linalg::norm(aem.row(j));
        if nrm == 0.0 {
            return Err(Error::Numeric(format!("aspect row {j} is zero and cannot be normalized")));
        }
        unit.row_mut(j).iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    let mut gram = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            gram.set(a, b, linalg::dot(unit.row(a), unit.row(b)));
        }
    }
    Ok((unit, norms, gram))
}

fn identity_deviation(gram: &Matrix) -> f64 {
    let k = gram.rows();
    let mut sq = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dev = gram.get(a, b) - if a == b { 1.0 } else { 0.0 };
            sq += dev * dev;
        }
    }
    sq.sqrt()
}

/// `λ · max(0, ‖Â·Âᵀ − I‖_F − s)` where Â has unit-norm rows.
pub fn ortho_loss(aem: &Matrix, lambda: f64, offset: f64) -> Result<f64> {
    let (_, _, gram) = normalized_gram(aem)?;
    Ok(lambda * (identity_deviation(&gram) - offset).max(0.0))
}

pub fn ortho_loss_grad(aem: &Matrix, lambda: f64, offset: f64) -> Result<(f64, Matrix)> {
    let (unit, norms, gram) = normalized_gram(aem)?;
    let (k, d) = (aem.rows(), aem.cols());
    let dev = identity_deviation(&gram);
    let mut grad = Matrix::zeros(k, d);
    if lambda == 0.0 || dev - offset <= 0.0 {
        return Ok((lambda * (dev - offset).max(0.0), grad));
    }
    // dU/dG = λ (G − I) / ‖G − I‖; dÂ = 2 (dU/dG) Â since G is symmetric.
    let mut d_unit = Matrix::zeros(k, d);
    for a in 0..k {
        for b in 0..k {
            let g = gram.get(a, b) - if a == b { 1.0 } else { 0.0 };
            linalg::axpy(d_unit.row_mut(a), 2.0 * lambda * g / dev, unit.row(b));
        }
    }
    // Through the row normalization â = a / ‖a‖.
    for a in 0..k {
        let u = unit.row(a);
        let du = d_unit.row(a);
        let proj = linalg::dot(u, du);
        for ((g, &dv), &uv) in grad.row_mut(a).iter_mut().zip(du).zip(u) {
            *g = (dv - uv * proj) / norms[a];
        }
    }
    Ok((lambda * (dev - offset), grad))
}

/// Indices of the largest and second-largest probability, ties to the lower index.
pub fn top_two(probs: &[f64]) -> (usize, usize) {
    assert!(probs.len() >= 2, "top-two selection needs at least two aspects");
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    (order[0], order[1])
}

/// `max(0, 1 + ‖AS_j − aem_j‖ − ‖AS_j − AS_l‖)` for the top-2 aspects j, l.
pub fn tlas_loss(state: &ForwardState, aem: &Matrix) -> f64 {
    tlas_loss_grad(state, aem).0
}

/// TLAS loss with gradients on the aspect sentences and the aspect matrix.
pub fn tlas_loss_grad(state: &ForwardState, aem: &Matrix) -> (f64, Matrix, Matrix) {
    let (k, d) = (aem.rows(), aem.cols());
    let mut d_as = Matrix::zeros(k, d);
    let mut d_aem = Matrix::zeros(k, d);
    let (j, l) = top_two(&state.probs);
    let as_j = state.aspect_sentences.row(j);
    let as_l = state.aspect_sentences.row(l);
    let pull = linalg::distance(as_j, aem.row(j));
    let push = linalg::distance(as_j, as_l);
    let loss = 1.0 + pull - push;
    if loss <= 0.0 {
        return (0.0, d_as, d_aem);
    }
    if pull > 0.0 {
        for c in 0..d {
            let g = (as_j[c] - aem.get(j, c)) / pull;
            d_as.add_at(j, c, g);
            d_aem.add_at(j, c, -g);
        }
    }
    if push > 0.0 {
        for c in 0..d {
            let g = (as_j[c] - as_l[c]) / push;
            d_as.add_at(j, c, -g);
            d_as.add_at(l, c, g);
        }
    }
    (loss, d_as, d_aem)
}

/// Loss terms owned by a single sentence (hinge and TLAS), for the given config.
pub fn sentence_loss(state: &ForwardState, negatives: &[Vec<f64>], params: &CmamParams, cfg: &TrainConfig) -> (f64, f64) {
    let h = hinge_loss(&state.reconstruction, &state.target, negatives);
    let t = if cfg.tlas_enabled {
        tlas_loss(state, &params.aem) * cfg.tlas_scale
    } else {
        0.0
    };
    (h, t)
}

/// Full per-sentence objective `H + U + T`.
pub fn total_loss(state: &ForwardState, negatives: &[Vec<f64>], params: &CmamParams, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let (h, t) = sentence_loss(state, negatives, params, cfg);
    let u = ortho_loss(&params.aem, cfg.lambda, cfg.ortho_offset)?;
    Ok(LossBreakdown::new(h, u, t))
}

/// Which part of the objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Hinge,
    Ortho,
    Tlas,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Hinge, LossTerm::Ortho, LossTerm::Tlas, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Hinge => "H",
            LossTerm::Ortho => "U",
            LossTerm::Tlas => "T",
            LossTerm::Total => "L",
        }
    }
}

/// Per-sentence hinge and TLAS values with their parameter gradient (no orthogonality term).
pub fn sentence_loss_grad(
    state: &ForwardState,
    negatives: &[Vec<f64>],
    params: &CmamParams,
    cfg: &TrainConfig,
) -> (f64, f64, ParamGrads) {
    let mut upstream = UpstreamGrads::zeros(params.dim, params.aspects);
    let (h, d_rs) = hinge_loss_grad(&state.reconstruction, &state.target, negatives);
    upstream.reconstruction = d_rs;
    let mut t = 0.0;
    if cfg.tlas_enabled {
        let (tl, d_as, d_aem) = tlas_loss_grad(state, &params.aem);
        t = tl * cfg.tlas_scale;
        upstream.aspect_sentences.add_scaled(&d_as, cfg.tlas_scale);
        upstream.aem.add_scaled(&d_aem, cfg.tlas_scale);
    }
    (h, t, model::gradients(state, params, &upstream))
}

/// Value and parameter gradient of one loss term on one sentence.
pub fn term_loss_grad(
    state: &ForwardState,
    negatives: &[Vec<f64>],
    params: &CmamParams,
    cfg: &TrainConfig,
    term: LossTerm,
) -> Result<(f64, ParamGrads)> {
    let mut upstream = UpstreamGrads::zeros(params.dim, params.aspects);
    let mut value = 0.0;
    if matches!(term, LossTerm::Hinge | LossTerm::Total) {
        let (h, d_rs) = hinge_loss_grad(&state.reconstruction, &state.target, negatives);
        value += h;
        upstream.reconstruction = d_rs;
    }
    if matches!(term, LossTerm::Ortho | LossTerm::Total) {
        let (u, d_aem) = ortho_loss_grad(&params.aem, cfg.lambda, cfg.ortho_offset)?;
        value += u;
        upstream.aem.add_scaled(&d_aem, 1.0);
    }
    if matches!(term, LossTerm::Tlas | LossTerm::Total) && cfg.tlas_enabled {
        let (t, d_as, d_aem) = tlas_loss_grad(state, &params.aem);
        value += t * cfg.tlas_scale;
        upstream.aspect_sentences.add_scaled(&d_as, cfg.tlas_scale);
        upstream.aem.add_scaled(&d_aem, cfg.tlas_scale);
    }
    Ok((value, model::gradients(state, params, &upstream)))
}

/// Value of one loss term, evaluated from scratch (used by finite differences).
pub fn term_loss(
    state: &ForwardState,
    negatives: &[Vec<f64>],
    params: &CmamParams,
    cfg: &TrainConfig,
    term: LossTerm,
) -> Result<f64> {
    let b = total_loss(state, negatives, params, cfg)?;
    Ok(match term {
        LossTerm::Hinge => b.h,
        LossTerm::Ortho => b.u,
        LossTerm::Tlas => b.t,
        LossTerm::Total => b.total,
    })
}

/// Uniformly samples `count` distinct sentence indices from `0..pool_size`,
/// never returning `exclude`.
pub fn sample_negative_indices(pool_size: usize, exclude: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if pool_size <= count || exclude >= pool_size {
        return Err(Error::Invalid(format!(
            "negative pool of {pool_size} sentences is too small for {count} negatives"
        )));
    }
    Ok(rand::seq::index::sample(rng, pool_size - 1, count)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect())
}

/// Mean word vectors of `count` random sentences other than `exclude`.
pub fn sample_negatives(pool: &[Vec<f64>], exclude: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    Ok(sample_negative_indices(pool.len(), exclude, count, rng)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Bias-corrected Adam over every tensor of [`CmamParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
}

impl Adam {
    pub fn new(params: &CmamParams, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut CmamParams, grads: &ParamGrads) -> Result<()> {
        let grad_tensors = grads.tensors();
        if let Some((name, _)) = grad_tensors.iter().find(|(_, g)| !g.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

impl BatchLog {
    pub const CSV_HEADER: &'static str = "epoch,batch,h,u,t,total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.batch, self.loss.h, self.loss.u, self.loss.t, self.loss.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CmamParams,
    pub log: Vec<BatchLog>,
}

/// Mini-batch Adam training. Sentences are reshuffled each epoch from the run
/// seed; each sentence draws fresh negatives. `on_epoch` is called with the
/// 1-based epoch index and the parameters after that epoch.
pub fn train<F>(
    corpus: &[EncodedSentence],
    embeddings: &EmbeddingMatrix,
    mut params: CmamParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &CmamParams) -> Result<()>,
{
    cfg.validate()?;
    params.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("training corpus is empty".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.is_empty()) {
        return Err(Error::Invalid(format!("training sentence {i} is empty")));
    }
    if cfg.tlas_enabled && params.aspects < 2 {
        return Err(Error::Config("the aspect-spreading loss needs at least two aspects".into()));
    }
    let targets: Vec<Vec<f64>> = corpus.iter().map(|s| embeddings.mean_of(&s.ids)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params, cfg);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let negatives: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| sample_negative_indices(corpus.len(), i, cfg.negatives_per_sample, &mut rng))
                .collect::<Result<_>>()?;
            let per_sentence: Vec<Result<(f64, f64, ParamGrads)>> = batch
                .par_iter()
                .zip(negatives.par_iter())
                .map(|(&i, neg_idx)| {
                    let state = model::forward(&corpus[i], embeddings, &params)?;
                    let negs: Vec<Vec<f64>> = neg_idx.iter().map(|&n| targets[n].clone()).collect();
                    Ok(sentence_loss_grad(&state, &negs, &params, cfg))
                })
                .collect();

            let (u, d_aem) = ortho_loss_grad(&params.aem, cfg.lambda, cfg.ortho_offset)?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = params.zeros_like();
            let mut sums = LossBreakdown::default();
            for (res, &i) in per_sentence.into_iter().zip(batch) {
                let (h, t, g) = res?;
                let sentence = LossBreakdown::new(h, u, t);
                if !sentence.total.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss on training sentence {i}")));
                }
                debug_assert!(h >= 0.0 && u >= 0.0 && t >= 0.0);
                sums.h += h;
                sums.u += u;
                sums.t += t;
                sums.total += sentence.total;
                grads.add_scaled(&g, scale);
            }
            grads.aem.add_scaled(&d_aem, 1.0);
            adam.step(&mut params, &grads)?;
            log.push(BatchLog {
                epoch,
                batch: batch_idx,
                loss: LossBreakdown {
                    h: sums.h * scale,
                    u: sums.u * scale,
                    t: sums.t * scale,
                    total: sums.total * scale,
                },
            });
        }
        if let Some(last) = log.last() {
            log::info!(
                "epoch {epoch}: last batch h={:.4} u={:.4} t={:.4} total={:.4}",
                last.loss.h,
                last.loss.u,
                last.loss.t,
                last.loss.total
            );
        }
        on_epoch(epoch, &params)?;
    }
    Ok(TrainOutcome { params, log })
}
