//! Which tokens get fresh K/V at each layer.
//!
//! Attention Recovery (AR) counts how many of the highest-attention tokens
//! are needed to cover a fraction of the total attention mass. At the 55%
//! threshold those tokens are *hot*, the rest *cold*. The first-layer budget
//! weighs the two groups (`omega_cold * |cold| + omega_hot * |hot|`), and
//! every later layer keeps the highest-deviation fraction of the previous
//! layer's set, so the sets form a descending chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{round_half_up, DeviationReport};

pub const AR_THRESHOLD: f64 = 0.55;
pub const OMEGA_COLD: f64 = 0.1;
pub const OMEGA_HOT: f64 = 0.5;

/// Smallest `k` whose top-`k` attention mass exceeds `thres` of the total.
pub fn attention_recovery(attn_avg: &[f32], thres: f64) -> Result<usize> {
    if !(thres > 0.0 && thres < 1.0) {
        return Err(Error::Config(format!("AR threshold {thres} must lie in (0, 1)")));
    }
    if attn_avg.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Shape("attention scores must be nonnegative".into()));
    }
    let total: f64 = attn_avg.iter().map(|&a| a as f64).sum();
    if total <= 0.0 {
        return Err(Error::Empty("attention vector has zero mass"));
    }
    let mut sorted: Vec<f32> = attn_avg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let goal = thres * total;
    let mut acc = 0.0f64;
    for (i, &a) in sorted.iter().enumerate() {
        acc += a as f64;
        if acc > goal {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotColdSplit {
    pub r_dynamic: f64,
    /// Ascending token indices.
    pub hot: Vec<usize>,
    /// Ascending token indices.
    pub cold: Vec<usize>,
}

impl HotColdSplit {
    pub fn len(&self) -> usize {
        self.hot.len() + self.cold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices sorted by descending score; equal scores favour later positions.
pub(crate) fn rank_desc_late_first(indices: &[usize], score: impl Fn(usize) -> f32) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(b.cmp(&a)));
    order
}

pub fn classify_hot_cold(attn_avg: &[f32], thres: f64) -> Result<HotColdSplit> {
    let k = attention_recovery(attn_avg, thres)?;
    let all: Vec<usize> = (0..attn_avg.len()).collect();
    let order = rank_desc_late_first(&all, |i| attn_avg[i]);
    let mut is_hot = vec![false; attn_avg.len()];
    for &i in &order[..k] {
        is_hot[i] = true;
    }
    let (hot, cold): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&i| is_hot[i]);
    Ok(HotColdSplit { r_dynamic: k as f64 / attn_avg.len() as f64, hot, cold })
}

/// `round(omega_cold * |cold| + omega_hot * |hot|)`, clamped to `[1, T]`.
pub fn first_layer_budget(split: &HotColdSplit, omega_cold: f64, omega_hot: f64) -> usize {
    let raw = omega_cold * split.cold.len() as f64 + omega_hot * split.hot.len() as f64;
    round_half_up(raw).clamp(1, split.len().max(1))
}

/// Keep the `round(alpha * |prev|)` highest-deviation members of `prev`.
pub fn select_next_layer(prev: &[usize], alpha: f64, deviations: &DeviationReport) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Schedule(format!("alpha {alpha} outside (0, 1]")));
    }
    if prev.is_empty() {
        return Err(Error::Empty("previous recompute set"));
    }
    let count = round_half_up(alpha * prev.len() as f64);
    select_top(prev, count, deviations, None)
}

/// The `count` members of `prev` with the largest deviation (clamped to
/// `[1, |prev|]`), ties toward later positions. `force` is always included
/// when it belongs to `prev`. Returned ascending.
pub fn select_top(
    prev: &[usize],
    count: usize,
    deviations: &DeviationReport,
    force: Option<usize>,
) -> Result<Vec<usize>> {
    if let Some(&t) = prev.iter().find(|&&t| deviations.sigma_of(t).is_none()) {
        return Err(Error::Schedule(format!("no deviation recorded for token {t}")));
    }
    let count = count.clamp(1, prev.len().max(1)).min(prev.len());
    let mut order = rank_desc_late_first(prev, |t| deviations.sigma_of(t).unwrap_or(0.0));
    if let Some(f) = force.filter(|f| prev.contains(f)) {
        order.retain(|&t| t != f);
        order.insert(0, f);
    }
    let mut out = order[..count].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Linear ramp from 0.5 (second layer) to 0.9 (last layer); one entry per
/// layer after the first.
pub fn default_alpha_ramp(n_layers: usize) -> Vec<f64> {
    let steps = n_layers.saturating_sub(1);
    match steps {
        0 => Vec::new(),
        1 => vec![0.9],
        _ => (0..steps).map(|i| 0.5 + 0.4 * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Closed-form budgets `round(T * prod_{j<=i} alpha[j])`, floor 1, never
/// growing. `alpha[0]` is the first-layer budget ratio.
pub fn product_budgets(t: usize, alpha: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(alpha.len());
    let mut prod = 1.0f64;
    let mut prev = t.max(1);
    for &a in alpha {
        prod *= a;
        let b = round_half_up(t as f64 * prod).clamp(1, prev);
        out.push(b);
        prev = b;
    }
    out
}

/// Realised recompute schedule of one prefill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecomputePlan {
    pub omega_cold: f64,
    pub omega_hot: f64,
    /// `alpha_recomp[0]` is the first-layer budget ratio.
    pub alpha_recomp: Vec<f64>,
    /// Index 0 holds the tokens marked after the (fully recomputed) first
    /// layer; index `i > 0` the tokens recomputed at layer `i`.
    pub per_layer_sets: Vec<Vec<usize>>,
}

impl RecomputePlan {
    pub fn is_nested(&self) -> bool {
        self.per_layer_sets.windows(2).all(|w| {
            let prev = &w[0];
            w[1].iter().all(|t| prev.binary_search(t).is_ok())
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.per_layer_sets.iter().map(Vec::len).collect()
    }
}
