//! Measurements: KV deviation, rank correlation, perplexity, ROUGE-L and
//! cache accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::StoredKV;
use crate::tensor::{l2_distance, Matrix};

pub const DEFAULT_HD_FRACTION: f64 = 0.4;
pub const ROUGE_BETA: f64 = 1.2;

/// Per-token key/value deviation between a reused and a recomputed cache.
///
/// `tokens` lists the token indices covered, ascending; the sigma vectors
/// are aligned with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub tokens: Vec<usize>,
    pub sigma_k: Vec<f32>,
    pub sigma_v: Vec<f32>,
    pub sigma_kv: Vec<f32>,
    pub hd_fraction: f64,
    pub hd_set: Vec<usize>,
}

impl DeviationReport {
    pub fn new(tokens: Vec<usize>, sigma_k: Vec<f32>, sigma_v: Vec<f32>, hd_fraction: f64) -> Self {
        let sigma_kv: Vec<f32> = sigma_k.iter().zip(&sigma_v).map(|(k, v)| k + v).collect();
        let n_hd = round_half_up(hd_fraction * tokens.len() as f64).min(tokens.len());
        // Highest deviation first; equal values keep the lower token index.
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.sort_by(|&a, &b| sigma_kv[b].total_cmp(&sigma_kv[a]).then(tokens[a].cmp(&tokens[b])));
        let hd_set = order[..n_hd].iter().map(|&i| tokens[i]).collect();
        Self { tokens, sigma_k, sigma_v, sigma_kv, hd_fraction, hd_set }
    }

    /// Deviation of one token, if covered.
    pub fn sigma_of(&self, token: usize) -> Option<f32> {
        self.tokens.binary_search(&token).ok().map(|i| self.sigma_kv[i])
    }

    pub fn mean_sigma_kv(&self) -> f64 {
        if self.sigma_kv.is_empty() {
            return 0.0;
        }
        self.sigma_kv.iter().map(|&s| s as f64).sum::<f64>() / self.sigma_kv.len() as f64
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Row-wise L2 deviation of `reused` against `recomputed`.
pub fn kv_deviation(reused: (&Matrix, &Matrix), recomputed: (&Matrix, &Matrix)) -> Result<DeviationReport> {
    kv_deviation_with(reused, recomputed, DEFAULT_HD_FRACTION)
}

pub fn kv_deviation_with(
    reused: (&Matrix, &Matrix),
    recomputed: (&Matrix, &Matrix),
    hd_fraction: f64,
) -> Result<DeviationReport> {
    let shapes = [reused.0, reused.1, recomputed.0, recomputed.1].map(|m| (m.rows(), m.cols()));
    if shapes.iter().any(|s| *s != shapes[0]) {
        return Err(Error::Shape(format!("deviation inputs differ in shape: {shapes:?}")));
    }
    let t = shapes[0].0;
    let sigma_k = (0..t).map(|i| l2_distance(reused.0.row(i), recomputed.0.row(i))).collect();
    let sigma_v = (0..t).map(|i| l2_distance(reused.1.row(i), recomputed.1.row(i))).collect();
    Ok(DeviationReport::new((0..t).collect(), sigma_k, sigma_v, hd_fraction))
}

/// Rank correlation result; zero-variance inputs have no defined value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Correlation {
    Value(f64),
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Degenerate => None,
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation of per-token deviations in two layers.
pub fn spearman_adjacent(dev_i: &[f32], dev_j: &[f32]) -> Result<Correlation> {
    if dev_i.len() != dev_j.len() {
        return Err(Error::Shape(format!("spearman lengths {} vs {}", dev_i.len(), dev_j.len())));
    }
    if dev_i.len() < 2 {
        return Err(Error::Shape("spearman needs at least two entries".into()));
    }
    let (a, b) = (average_ranks(dev_i), average_ranks(dev_j));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(Correlation::Degenerate);
    }
    Ok(Correlation::Value((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Jaccard overlap of two HD sets.
pub fn hd_overlap(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// `exp(mean_t -log softmax(logits[t])[tokens[t + 1]])`.
pub fn perplexity(logits: &Matrix, tokens: &[u32]) -> Result<f64> {
    if logits.rows() != tokens.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.rows(), tokens.len())));
    }
    if tokens.len() < 2 {
        return Err(Error::Shape("perplexity needs at least two tokens".into()));
    }
    let mut nll = 0.0f64;
    for t in 0..tokens.len() - 1 {
        let row = logits.row(t);
        let next = tokens[t + 1] as usize;
        if next >= row.len() {
            return Err(Error::TokenOutOfRange { id: tokens[t + 1], vocab: row.len() });
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        nll += lse - row[next] as f64;
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure over whitespace tokens, recall-weighted by `beta = 1.2`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Bytes held by live K and V rows at 32-bit precision.
pub fn cache_bytes(kv: &StoredKV) -> u64 {
    kv.layers()
        .iter()
        .zip(kv.live_mask())
        .map(|((k, v), mask)| {
            let live = mask.iter().filter(|&&m| m).count() as u64;
            live * (k.cols() + v.cols()) as u64 * 4
        })
        .sum()
}
