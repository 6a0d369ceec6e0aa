//! Template-learning objective: five regularizers over the template set and
//! the recovered planes, their weighted sum, the max-cosine detection
//! objective, and softmax cross entropy for the passive baseline.
//!
//! Each loss exists twice: a plain value function for callers that only need
//! numbers, and a graph builder used inside training steps. The graph
//! builders are the single differentiable path; the value functions share
//! the same underlying kernels without building a tape.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::fourier;
use crate::plane::{self, Plane};
use crate::real::Real;

/// Clamp applied to probability-like scores inside log terms.
pub const SCORE_EPS: f64 = 1e-7;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub magnitude: f64,
    pub recovery: f64,
    pub lowpass: f64,
    pub fake_similarity: f64,
    pub pairwise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            magnitude: 100.0,
            recovery: 30.0,
            lowpass: 5.0,
            fake_similarity: 0.003,
            pairwise: 10.0,
        }
    }
}

/// One evaluation of the combined objective, term by term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_m: f64,
    pub j_r: f64,
    pub j_c: f64,
    pub j_s: f64,
    pub j_p: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the stored terms; callers assert it
    /// matches `total` to catch aggregation drift.
    pub fn readd(&self) -> f64 {
        self.weights.magnitude * self.j_m
            + self.weights.recovery * self.j_r
            + self.weights.lowpass * self.j_c
            + self.weights.fake_similarity * self.j_s
            + self.weights.pairwise * self.j_p
    }
}

// ---- plain value functions ----

/// Squared L2 magnitude of a template, summed over pixels.
pub fn magnitude_value<T: Real>(s: &ArrayView2<T>) -> f64 {
    s.iter().map(|v| v.to_f64() * v.to_f64()).sum()
}

/// 1 - Cos(S, S_R) on raw flattened planes.
pub fn recovery_mismatch_value<T: Real>(s: &ArrayView2<T>, s_r: &ArrayView2<T>) -> f64 {
    1.0 - plane::cosine_flat(s.into_dyn(), s_r.into_dyn())
}

/// Low-frequency spectral energy inside the centered k x k window.
pub fn lowpass_value<T: Real>(s: &ArrayView2<T>, k: usize) -> f64 {
    fourier::lowpass_energy_value(s, k)
}

/// Highest cosine between any normalized template and the normalized
/// recovered-from-fake plane, with the winning index.
pub fn fake_similarity_value<T: Real>(planes: &[Plane<T>], s_f: &ArrayView2<T>) -> (f64, usize) {
    assert!(!planes.is_empty());
    let nf = plane::minmax_normalize(s_f);
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, p) in planes.iter().enumerate() {
        let np = plane::minmax_normalize(&p.view());
        let c = plane::cosine_flat(np.view().into_dyn(), nf.view().into_dyn());
        if c > best {
            best = c;
            arg = i;
        }
    }
    (best, arg)
}

/// Sum of pairwise cosines between normalized templates, i < j. Empty for a
/// singleton set.
pub fn pairwise_overlap_value<T: Real>(planes: &[Plane<T>]) -> f64 {
    let normalized: Vec<Plane<T>> = planes
        .iter()
        .map(|p| plane::minmax_normalize(&p.view()))
        .collect();
    let mut acc = 0.0;
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            acc += plane::cosine_flat(
                normalized[i].view().into_dyn(),
                normalized[j].view().into_dyn(),
            );
        }
    }
    acc
}

/// Binary cross entropy of clamped scores against labels, averaged.
pub fn detection_objective_value(scores: &[(f64, bool)]) -> f64 {
    assert!(!scores.is_empty());
    let mut acc = 0.0;
    for &(s, real) in scores {
        let sc = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        acc += if real { -sc.ln() } else { -(1.0 - sc).ln() };
    }
    acc / scores.len() as f64
}

/// Mean softmax cross entropy of logit rows against class indices.
pub fn passive_ce_value(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    assert!(!logits.is_empty());
    let mut acc = 0.0;
    for (row, &cls) in logits.iter().zip(labels.iter()) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        acc += -(row[cls] - m - z.ln());
    }
    acc / logits.len() as f64
}

// ---- graph builders ----

/// Σ S² term.
pub fn magnitude_term<T: Real>(g: &Graph<T>, s: Var) -> Var {
    g.sum_sq(s)
}

/// 1 - Cos(S, S_R) term on raw planes.
pub fn recovery_term<T: Real>(g: &Graph<T>, s: Var, s_r: Var) -> Var {
    let c = g.cos_flat(s, s_r);
    let neg = g.scale(c, T::of(-1.0));
    g.add_scalar(neg, T::ONE)
}

/// Low-pass spectral energy term.
pub fn lowpass_term<T: Real>(g: &Graph<T>, s: Var, k: usize) -> Var {
    g.lowpass_energy(s, k)
}

/// Normalizes every template once; reuse the result across the terms that
/// need it so each template is normalized a single time per step.
pub fn normalized_set<T: Real>(g: &Graph<T>, templates: &[Var]) -> Vec<Var> {
    templates.iter().map(|&t| g.minmax_norm(t)).collect()
}

/// max_i Cos(N(S_i), N(S_F)) term.
pub fn fake_similarity_term<T: Real>(g: &Graph<T>, normalized: &[Var], s_f: Var) -> Var {
    let nf = g.minmax_norm(s_f);
    let cosines: Vec<Var> = normalized.iter().map(|&n| g.cos_flat(n, nf)).collect();
    g.max_of(&cosines).0
}

/// Σ_{i<j} Cos(N(S_i), N(S_j)) term; 0 for a singleton set.
pub fn pairwise_term<T: Real>(g: &Graph<T>, normalized: &[Var]) -> Var {
    let mut terms = Vec::new();
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            terms.push((g.cos_flat(normalized[i], normalized[j]), T::ONE));
        }
    }
    if terms.is_empty() {
        let zero = g.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), T::ZERO));
        return zero;
    }
    g.weighted_sum(&terms)
}

/// Mean BCE over (score, label) pairs with the standard clamp.
pub fn detection_term<T: Real>(g: &Graph<T>, scores: &[(Var, bool)]) -> Var {
    assert!(!scores.is_empty());
    let eps = T::of(SCORE_EPS);
    let terms: Vec<Var> = scores
        .iter()
        .map(|&(s, real)| g.bce_from_score(s, real, eps))
        .collect();
    g.mean_of(&terms)
}

/// The five weighted terms and their sum for a single batch item, given the
/// whole template set, the selected index, and recovered planes.
pub struct ObjectiveTerms {
    pub j_m: Var,
    pub j_r: Var,
    pub j_c: Var,
    pub j_s: Var,
    pub j_p: Var,
    pub total: Var,
}

/// Single-item combined objective. `s_r`/`s_f` are the planes recovered
/// from the encrypted-real and manipulated images.
pub fn combined_objective<T: Real>(
    g: &Graph<T>,
    templates: &[Var],
    selected: usize,
    s_r: Var,
    s_f: Var,
    lowpass_k: usize,
    weights: LossWeights,
) -> ObjectiveTerms {
    assert!(selected < templates.len());
    let normalized = normalized_set(g, templates);
    let j_m = magnitude_term(g, templates[selected]);
    let j_r = recovery_term(g, templates[selected], s_r);
    let j_c = lowpass_term(g, templates[selected], lowpass_k);
    let j_s = fake_similarity_term(g, &normalized, s_f);
    let j_p = pairwise_term(g, &normalized);
    let total = g.weighted_sum(&[
        (j_m, T::of(weights.magnitude)),
        (j_r, T::of(weights.recovery)),
        (j_c, T::of(weights.lowpass)),
        (j_s, T::of(weights.fake_similarity)),
        (j_p, T::of(weights.pairwise)),
    ]);
    ObjectiveTerms {
        j_m,
        j_r,
        j_c,
        j_s,
        j_p,
        total,
    }
}

/// Softmax cross entropy over logit rows (N, C) against class indices,
/// averaged over rows. Numerically stabilized by row-max subtraction.
pub fn passive_ce_term<T: Real>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Var {
    g.softmax_cross_entropy(logits, labels)
}
