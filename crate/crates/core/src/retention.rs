//! Which tokens stay in the KV cache at each layer.
//!
//! The first layer keeps `max(0.8, r_dynamic)` of the prompt. Hot tokens and
//! tokens marked for recomputation are protected; only cold, unmarked tokens
//! are evicted, lowest attention first. Deeper layers follow a retention
//! pattern whose cumulative ratio `R[i]` is applied to the shrinking live set.
//! Evicted tokens never come back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::round_half_up;
use crate::recompute::{rank_desc_late_first, HotColdSplit};

pub const FIRST_LAYER_FLOOR: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Constant,
    ExpGrowth,
    ExpDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPattern {
    pub kind: PatternKind,
    pub start_ratio: f64,
    pub rate: f64,
}

/// Decay rate that halves the retained fraction between the first and the
/// last layer.
pub fn default_rate(n_layers: usize) -> f64 {
    std::f64::consts::LN_2 / n_layers.saturating_sub(1).max(1) as f64
}

/// Cumulative per-layer ratios `R[i]`; every pattern starts at `start_ratio`.
pub fn pattern_ratios(pattern: &RetentionPattern, n_layers: usize) -> Result<Vec<f64>> {
    if n_layers == 0 {
        return Err(Error::Config("retention pattern needs at least one layer".into()));
    }
    if !(pattern.rate > 0.0) || !pattern.rate.is_finite() {
        return Err(Error::Config(format!("retention rate {} must be positive", pattern.rate)));
    }
    if !(pattern.start_ratio > 0.0 && pattern.start_ratio <= 1.0) {
        return Err(Error::Config(format!("start ratio {} outside (0, 1]", pattern.start_ratio)));
    }
    let s = pattern.start_ratio;
    let lambda = pattern.rate;
    Ok((0..n_layers)
        .map(|i| match pattern.kind {
            PatternKind::Constant => s,
            PatternKind::ExpDecay => s * (-lambda * i as f64).exp(),
            PatternKind::ExpGrowth => (s * (lambda * i as f64).exp()).min(1.0),
        })
        .collect())
}

/// First-layer retention ratio.
pub fn first_layer_ratio(r_dynamic: f64) -> f64 {
    r_dynamic.max(FIRST_LAYER_FLOOR)
}

/// Query rows whose attention drives first-layer eviction: the trailing
/// `(1 - r_dynamic)` fraction of positions (at least one row).
pub fn trailing_rows(t: usize, r_dynamic: f64) -> std::ops::Range<usize> {
    let n = round_half_up((1.0 - r_dynamic) * t as f64).clamp(1, t.max(1));
    t.saturating_sub(n)..t
}

/// First-layer keep set at ratio `max(0.8, r_dynamic)`.
///
/// `scores` is the column-mean attention over the trailing query rows.
pub fn first_layer_retention(split: &HotColdSplit, recompute_set: &[usize], scores: &[f32]) -> Result<Vec<usize>> {
    let t = split.len();
    if scores.len() != t || recompute_set.iter().any(|&i| i >= t) {
        return Err(Error::Shape(format!(
            "first-layer retention over {t} tokens got {} scores",
            scores.len()
        )));
    }
    let target = round_half_up(first_layer_ratio(split.r_dynamic) * t as f64);
    let mut protected = split.hot.clone();
    protected.extend_from_slice(recompute_set);
    Ok(first_layer_keep(t, &protected, scores, target))
}

/// Evict the lowest-scoring unprotected tokens until `target` remain. When
/// the protected tokens alone exceed `target`, nothing is evicted.
pub fn first_layer_keep(t: usize, protected: &[usize], scores: &[f32], target: usize) -> Vec<usize> {
    let mut is_protected = vec![false; t];
    for &p in protected {
        is_protected[p] = true;
    }
    let n_protected = is_protected.iter().filter(|&&p| p).count();
    if n_protected > target || target >= t {
        return (0..t).collect();
    }
    let free: Vec<usize> = (0..t).filter(|&i| !is_protected[i]).collect();
    let order = rank_desc_late_first(&free, |i| scores[i]);
    let mut keep = vec![false; t];
    for i in 0..t {
        keep[i] = is_protected[i];
    }
    for &i in &order[..target - n_protected] {
        keep[i] = true;
    }
    (0..t).filter(|&i| keep[i]).collect()
}

/// Keep `round(|prev_keep| * ratio_step)` tokens (floor 1): protected
/// first, then the highest-attention survivors.
pub fn layer_keep_set(prev_keep: &[usize], ratio_step: f64, attn_avg: &[f32], protected: &[usize]) -> Result<Vec<usize>> {
    if !(ratio_step > 0.0 && ratio_step <= 1.0) {
        return Err(Error::Schedule(format!("retention step {ratio_step} outside (0, 1]")));
    }
    let count = round_half_up(prev_keep.len() as f64 * ratio_step);
    keep_top(prev_keep, count, attn_avg, protected)
}

/// Keep exactly `count` of `prev_keep` (clamped to `[max(1, |protected|), |prev_keep|]`).
pub fn keep_top(prev_keep: &[usize], count: usize, attn_avg: &[f32], protected: &[usize]) -> Result<Vec<usize>> {
    if let Some(&p) = protected.iter().find(|p| prev_keep.binary_search(p).is_err()) {
        return Err(Error::Schedule(format!("protected token {p} is not live")));
    }
    if let Some(&i) = prev_keep.iter().find(|&&i| i >= attn_avg.len()) {
        return Err(Error::IndexOutOfRange { index: i, len: attn_avg.len() });
    }
    let mut protected: Vec<usize> = protected.to_vec();
    protected.sort_unstable();
    protected.dedup();
    let count = count.max(1).max(protected.len()).min(prev_keep.len());
    let free: Vec<usize> = prev_keep.iter().copied().filter(|i| protected.binary_search(i).is_err()).collect();
    let order = rank_desc_late_first(&free, |i| attn_avg[i]);
    let mut keep = protected;
    keep.extend_from_slice(&order[..count - keep.len()]);
    keep.sort_unstable();
    Ok(keep)
}

/// Realised retention of one prefill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub per_layer_keep: Vec<Vec<usize>>,
    /// Realised cumulative ratios `|keep[i]| / T`.
    pub ratios: Vec<f64>,
}

impl RetentionPlan {
    pub fn from_keep_sets(t: usize, per_layer_keep: Vec<Vec<usize>>) -> Self {
        let ratios = per_layer_keep.iter().map(|k| k.len() as f64 / t as f64).collect();
        Self { per_layer_keep, ratios }
    }

    pub fn is_descending(&self) -> bool {
        self.per_layer_keep
            .windows(2)
            .all(|w| w[1].iter().all(|t| w[0].binary_search(t).is_ok()))
    }

    pub fn live_counts(&self) -> Vec<usize> {
        self.per_layer_keep.iter().map(Vec::len).collect()
    }
}
