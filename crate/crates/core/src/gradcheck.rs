//! Central finite-difference verification of the analytic gradients.
//!
//! The numerical side only calls the forward pass and the loss values, never
//! the backward pass. Random instances are resampled until every hinge, max and
//! top-2 selection sits clearly away from its kink so both sides see the same
//! smooth branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{self, Matrix};
use crate::model::{self, CmamParams, ForwardState};
use crate::objective::{self, LossBreakdown, LossTerm, TrainConfig};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for gradients that vanish.
    pub floor: f64,
    pub max_len: usize,
    pub max_dim: usize,
    pub max_aspects: usize,
    pub max_kernels: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 100,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_len: 8,
            max_dim: 8,
            max_aspects: 4,
            max_kernels: 3,
            seed: 0,
        }
    }
}

/// A self-contained objective evaluation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sentence: Matrix,
    pub negatives: Vec<Vec<f64>>,
    pub params: CmamParams,
    pub train: TrainConfig,
}

impl Instance {
    pub fn evaluate(&self, params: &CmamParams) -> Result<LossBreakdown> {
        let state = model::forward_matrix(self.sentence.clone(), params)?;
        objective::total_loss(&state, &self.negatives, params, &self.train)
    }

    pub fn state(&self) -> Result<ForwardState> {
        model::forward_matrix(self.sentence.clone(), &self.params)
    }

    /// Smallest distance from any non-differentiable point of the objective.
    pub fn kink_distance(&self) -> Result<f64> {
        let state = self.state()?;
        let mut dist = f64::INFINITY;
        let pos = linalg::dot(&state.reconstruction, &state.target);
        for n in &self.negatives {
            dist = dist.min((1.0 - pos + linalg::dot(&state.reconstruction, n)).abs());
        }
        let u_free = objective::ortho_loss(&self.params.aem, 1.0, 0.0)?;
        dist = dist.min((u_free - self.train.ortho_offset).abs());
        let (j, l) = objective::top_two(&state.probs);
        let pull = linalg::distance(state.aspect_sentences.row(j), self.params.aem.row(j));
        let push = linalg::distance(state.aspect_sentences.row(j), state.aspect_sentences.row(l));
        dist = dist.min((1.0 + pull - push).abs()).min(pull).min(push);
        let mut sorted = state.probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // Probabilities move far less than the losses; weight their gaps up.
        for w in sorted.windows(2).take(2) {
            dist = dist.min(10.0 * (w[0] - w[1]));
        }
        Ok(dist)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Draws a random instance within the size limits, at least 0.01 away from any kink.
pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<Instance> {
    loop {
        let n = rng.random_range(1..=cfg.max_len);
        let d = rng.random_range(2..=cfg.max_dim.max(2));
        let k = rng.random_range(2..=cfg.max_aspects.max(2));
        let f = rng.random_range(1..=cfg.max_kernels.max(1));
        let lens: Vec<usize> = (0..f).map(|_| [1, 3, 5][rng.random_range(0..3)]).collect();
        let mut params = CmamParams::zeros(d, k, &lens);
        for kernel in &mut params.kernels {
            kernel.weights = uniform(rng, kernel.weights.len(), 0.5);
            kernel.bias = uniform(rng, k, 0.5);
        }
        params.head_w = Matrix::from_vec(k, d, uniform(rng, k * d, 1.0));
        params.head_b = uniform(rng, k, 0.5);
        params.aem = Matrix::from_vec(k, d, uniform(rng, k * d, 1.0));
        let negatives = (0..rng.random_range(1..=4)).map(|_| uniform(rng, d, 1.0)).collect();
        let train = TrainConfig {
            lambda: rng.random_range(0.1..=1.0),
            ortho_offset: rng.random_range(0.0..=0.5),
            ..TrainConfig::default()
        };
        let inst = Instance {
            sentence: Matrix::from_vec(n, d, uniform(rng, n * d, 1.0)),
            negatives,
            params,
            train,
        };
        if inst.kink_distance()? > 0.01 {
            return Ok(inst);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TermResult {
    pub term: &'static str,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn pick(b: &LossBreakdown, term: LossTerm) -> f64 {
    match term {
        LossTerm::Hinge => b.h,
        LossTerm::Ortho => b.u,
        LossTerm::Tlas => b.t,
        LossTerm::Total => b.total,
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and central-difference gradients for every parameter and
/// every loss term of one instance.
pub fn check_instance(inst: &Instance, step: f64, floor: f64) -> Result<Vec<TermResult>> {
    let state = inst.state()?;
    let analytic: Vec<CmamParams> = LossTerm::ALL
        .iter()
        .map(|&t| objective::term_loss_grad(&state, &inst.negatives, &inst.params, &inst.train, t).map(|r| r.1))
        .collect::<Result<_>>()?;
    let mut results: Vec<TermResult> = LossTerm::ALL
        .iter()
        .map(|t| TermResult {
            term: t.name(),
            max_rel_error: 0.0,
            worst_tensor: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();

    let names: Vec<String> = inst.params.tensors().into_iter().map(|(n, _)| n).collect();
    for (tensor_idx, name) in names.iter().enumerate() {
        let len = inst.params.tensors()[tensor_idx].1.len();
        for i in 0..len {
            let mut plus = inst.params.clone();
            plus.tensors_mut()[tensor_idx].1[i] += step;
            let mut minus = inst.params.clone();
            minus.tensors_mut()[tensor_idx].1[i] -= step;
            let up = inst.evaluate(&plus)?;
            let down = inst.evaluate(&minus)?;
            for (t_idx, &term) in LossTerm::ALL.iter().enumerate() {
                let numeric = (pick(&up, term) - pick(&down, term)) / (2.0 * step);
                let a = analytic[t_idx].tensors()[tensor_idx].1[i];
                let err = relative_error(a, numeric, floor);
                let r = &mut results[t_idx];
                if err > r.max_rel_error || r.worst_tensor.is_empty() {
                    r.max_rel_error = r.max_rel_error.max(err);
                    r.worst_tensor = name.clone();
                    r.worst_index = i;
                    r.analytic = a;
                    r.numeric = numeric;
                }
            }
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub tolerance: f64,
    /// Worst relative error per loss term over all instances.
    pub worst: Vec<TermResult>,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: Vec<Option<TermResult>> = vec![None; LossTerm::ALL.len()];
    let mut failures = 0;
    for _ in 0..cfg.instances {
        let inst = random_instance(&mut rng, cfg)?;
        let results = check_instance(&inst, cfg.step, cfg.floor)?;
        if results.iter().any(|r| r.max_rel_error >= cfg.tolerance) {
            failures += 1;
        }
        for (slot, r) in worst.iter_mut().zip(results) {
            if slot.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                *slot = Some(r);
            }
        }
    }
    Ok(GradCheckReport {
        instances: cfg.instances,
        tolerance: cfg.tolerance,
        worst: worst.into_iter().flatten().collect(),
        failures,
    })
}
