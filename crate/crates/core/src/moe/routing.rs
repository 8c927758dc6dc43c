//! Top-1 routing decisions on plain values.

use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm, softmax_row};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct RoutingDecision<T> {
    /// Router logits `[N, E]`.
    pub scores: Tensor<T>,
    /// Row softmax of `scores`.
    pub probs: Tensor<T>,
    /// Argmax expert per token, lowest index on ties.
    pub chosen: Vec<usize>,
    pub kept: Vec<bool>,
    /// Kept tokens per expert.
    pub kept_counts: Vec<usize>,
    pub capacity: usize,
}

impl<T: Element> RoutingDecision<T> {
    pub fn n_tokens(&self) -> usize {
        self.chosen.len()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn n_dropped(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn fraction_dropped(&self) -> f64 {
        self.n_dropped() as f64 / self.n_tokens() as f64
    }

    /// Tokens whose argmax is each expert, before any dropping.
    pub fn assigned_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for &i in &self.chosen {
            counts[i] += 1;
        }
        counts
    }
}

/// `floor(capacity_factor · n_tokens / n_experts)`.
pub fn expert_capacity(capacity_factor: f64, n_tokens: usize, n_experts: usize) -> usize {
    (capacity_factor * n_tokens as f64 / n_experts as f64).floor() as usize
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Routes from precomputed router logits `[N, E]`. Nothing is dropped yet.
pub fn route_scores<T: Element>(scores: Tensor<T>) -> Result<RoutingDecision<T>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("route", s, &[]));
    }
    let (n, e) = (s[0], s[1]);
    if let Some(bad) = scores.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "route",
            msg: format!("non-finite router score {bad}"),
        });
    }
    let mut probs = vec![T::zero(); n * e];
    for (row, out) in scores.data().chunks(e).zip(probs.chunks_mut(e)) {
        softmax_row(row, out, true);
    }
    let chosen: Vec<usize> = probs.chunks(e).map(argmax).collect();
    let mut kept_counts = vec![0; e];
    for &i in &chosen {
        kept_counts[i] += 1;
    }
    Ok(RoutingDecision {
        probs: Tensor::new(vec![n, e], probs)?,
        scores,
        kept: vec![true; n],
        kept_counts,
        capacity: n,
        chosen,
    })
}

/// Router logits `x · w` for `x: [N, d]`, `w: [d, E]`, then [`route_scores`].
pub fn route<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<RoutingDecision<T>> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::shape("route", sx, sw));
    }
    let (n, d, e) = (sx[0], sx[1], sw[1]);
    let mut scores = vec![T::zero(); n * e];
    gemm(
        n,
        d,
        e,
        x.data(),
        false,
        w.data(),
        false,
        &mut scores,
        T::zero(),
    );
    route_scores(Tensor::new(vec![n, e], scores)?)
}

/// Keeps the first `capacity` tokens (in token order) sent to each expert.
pub fn apply_capacity<T: Element>(
    mut decision: RoutingDecision<T>,
    capacity: usize,
) -> RoutingDecision<T> {
    let mut counts = vec![0; decision.n_experts()];
    for (k, &i) in decision.kept.iter_mut().zip(&decision.chosen) {
        *k = counts[i] < capacity;
        if *k {
            counts[i] += 1;
        }
    }
    decision.kept_counts = counts;
    decision.capacity = capacity;
    decision
}

/// `α · E · Σ_i f_i · P_i`, with `f_i` the argmax share of expert `i` (before
/// dropping) and `P_i` its mean router probability.
pub fn load_balance_loss<T: Element>(decision: &RoutingDecision<T>, alpha: f64) -> f64 {
    let (n, e) = (decision.n_tokens(), decision.n_experts());
    let f = decision.assigned_counts();
    let mut mean_p = vec![0.0; e];
    for row in decision.probs.data().chunks(e) {
        for (m, &p) in mean_p.iter_mut().zip(row) {
            *m += p.f64();
        }
    }
    let dot: f64 = f
        .iter()
        .zip(&mean_p)
        .map(|(&c, &p)| (c as f64 / n as f64) * (p / n as f64))
        .sum();
    alpha * e as f64 * dot
}
