use super::{gelu, layer_norm, ModelEngine};
use crate::error::{Error, Result};
use crate::metrics::{DeviationReport, DEFAULT_HD_FRACTION};
use crate::recompute::{select_top, RecomputePlan};
use crate::retention::{first_layer_keep, keep_top, trailing_rows, RetentionPlan};
use crate::rope::{rotate_row, Direction};
use crate::schedule::LayerSchedule;
use crate::store::RearrangedCache;
use crate::tensor::{l2_distance, softmax_in_place, vec_matmul_into, Matrix};

/// Result of one prefill.
///
/// `per_layer_kv` keeps all `T` rows; `live[i]` lists the rows still cached
/// after layer `i`. Logits exist only for the tokens computed at the last
/// layer (`logit_positions`), which always include the final token.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub tokens: Vec<u32>,
    pub logits: Matrix,
    pub logit_positions: Vec<usize>,
    pub per_layer_kv: Vec<(Matrix, Matrix)>,
    pub live: Vec<Vec<usize>>,
    /// Attention averaged over heads, then over the computed query rows.
    pub per_layer_attn_avg: Vec<Vec<f32>>,
    pub recompute_trace: Vec<Vec<usize>>,
    /// Tokens picked after the first layer for recomputation at the second.
    pub marked: Vec<usize>,
    /// Fresh versus injected K/V over each layer's computed tokens; empty
    /// when nothing was injected.
    pub deviations: Vec<DeviationReport>,
    pub hot: Vec<usize>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits of the final prompt token.
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }

    /// Logit row for prompt position `pos`, if it was computed.
    pub fn logits_at(&self, pos: usize) -> Option<&[f32]> {
        self.logit_positions.binary_search(&pos).ok().map(|r| self.logits.row(r))
    }

    /// Live K and V rows of one layer.
    pub fn live_kv(&self, layer: usize) -> Result<(Matrix, Matrix)> {
        let (k, v) = &self.per_layer_kv[layer];
        Ok((k.gather_rows(&self.live[layer])?, v.gather_rows(&self.live[layer])?))
    }

    pub fn recompute_plan(&self, omega_cold: f64, omega_hot: f64, alpha_recomp: Vec<f64>) -> RecomputePlan {
        let mut sets = vec![self.marked.clone()];
        sets.extend(self.recompute_trace.iter().skip(1).cloned());
        RecomputePlan { omega_cold, omega_hot, alpha_recomp, per_layer_sets: sets }
    }

    pub fn retention_plan(&self) -> RetentionPlan {
        RetentionPlan::from_keep_sets(self.len(), self.live.clone())
    }
}

struct Attention {
    out: Matrix,
    avg: Vec<f32>,
    trailing: Vec<f32>,
}

impl ModelEngine {
    /// Prefill `tokens`, optionally on top of an injected cache.
    ///
    /// Without an injected cache the schedule must recompute everything;
    /// retention still applies. With one, layer 0 computes every token, the
    /// most-deviating `recompute[0]` are marked, and each deeper layer
    /// computes the `recompute[i]` most-deviating members of the previous
    /// set while all other tokens keep their injected K/V.
    pub fn prefill(&self, tokens: &[u32], injected: Option<&RearrangedCache>, schedule: &LayerSchedule) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let d = cfg.d_model;
        schedule.validate(cfg.n_layers, t)?;
        match injected {
            Some(inj) => {
                if inj.layers.len() != cfg.n_layers {
                    return Err(Error::Shape(format!("injected cache has {} layers, model {}", inj.layers.len(), cfg.n_layers)));
                }
                if let Some((k, _)) = inj.layers.iter().find(|(k, v)| k.rows() != t || v.rows() != t || k.cols() != d || v.cols() != d) {
                    return Err(Error::Shape(format!("injected cache is {}x{}, prompt needs {t}x{d}", k.rows(), k.cols())));
                }
            }
            None if !schedule.is_full_recompute(t) => {
                return Err(Error::Schedule("partial recompute needs an injected cache".into()));
            }
            None => {}
        }

        let last = t - 1;
        let all: Vec<usize> = (0..t).collect();
        let hot = schedule.first_layer.as_ref().map(|r| r.hot.clone()).unwrap_or_default();
        let r_dynamic = schedule.first_layer.as_ref().map_or(0.0, |r| r.r_dynamic);

        let mut hidden = self.embed(tokens)?;
        let mut queries = all.clone();
        let mut live_prev = all.clone();
        let mut marked = all.clone();
        let mut per_layer_kv = Vec::with_capacity(cfg.n_layers);
        let mut live = Vec::with_capacity(cfg.n_layers);
        let mut attn_avgs = Vec::with_capacity(cfg.n_layers);
        let mut trace = Vec::with_capacity(cfg.n_layers);
        let mut deviations = Vec::new();

        for l in 0..cfg.n_layers {
            let (q, fresh_k, fresh_v) = self.project(l, &hidden, &queries);
            let (mut k, mut v) = match injected {
                Some(inj) => inj.layers[l].clone(),
                None => (Matrix::zeros(t, d), Matrix::zeros(t, d)),
            };
            for (r, &i) in queries.iter().enumerate() {
                k.row_mut(i).copy_from_slice(fresh_k.row(r));
                v.row_mut(i).copy_from_slice(fresh_v.row(r));
            }
            let dev = injected.map(|inj| {
                let (ik, iv) = &inj.layers[l];
                let sk = queries.iter().enumerate().map(|(r, &i)| l2_distance(fresh_k.row(r), ik.row(i))).collect();
                let sv = queries.iter().enumerate().map(|(r, &i)| l2_distance(fresh_v.row(r), iv.row(i))).collect();
                DeviationReport::new(queries.clone(), sk, sv, DEFAULT_HD_FRACTION)
            });

            let trail_from = if l == 0 { trailing_rows(t, r_dynamic).start } else { 0 };
            let att = self.attend(&q, &queries, &k, &v, &live_prev, trail_from);

            self.finish_rows(l, &mut hidden, &queries, &att.out);

            let keep = if l == 0 {
                if let Some(dev) = &dev {
                    marked = select_top(&all, schedule.recompute[0], dev, Some(last))?;
                }
                let mut protected = hot.clone();
                if injected.is_some() {
                    protected.extend_from_slice(&marked);
                }
                protected.push(last);
                first_layer_keep(t, &protected, &att.trailing, schedule.retain[0])
            } else {
                let protected: &[usize] = if injected.is_some() { &queries } else { &[last] };
                keep_top(&live_prev, schedule.retain[l], &att.avg, protected)?
            };

            let next = match &dev {
                Some(dev) if l + 1 < cfg.n_layers => {
                    let prev = if l == 0 { &marked } else { &queries };
                    select_top(prev, schedule.recompute[l + 1], dev, Some(last))?
                }
                Some(_) => queries.clone(),
                None => keep.clone(),
            };

            trace.push(std::mem::replace(&mut queries, next));
            per_layer_kv.push((k, v));
            attn_avgs.push(att.avg);
            live_prev = keep.clone();
            live.push(keep);
            if let Some(dev) = dev {
                deviations.push(dev);
            }
        }

        // `queries` now holds the next layer's set; the logits come from the
        // tokens computed at the last layer.
        let logit_positions = trace.last().cloned().unwrap_or_default();
        let logits = self.logits_for(&hidden, &logit_positions);
        Ok(ForwardOutput {
            tokens: tokens.to_vec(),
            logits,
            logit_positions,
            per_layer_kv,
            live,
            per_layer_attn_avg: attn_avgs,
            recompute_trace: trace,
            marked,
            deviations,
            hot,
        })
    }

    /// Plain prefill: everything computed, everything retained.
    pub fn full_prefill(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.prefill(tokens, None, &LayerSchedule::full(self.config.n_layers, tokens.len()))
    }

    /// Rotated queries and keys plus values for the rows `rows` of `hidden`.
    fn project(&self, layer: usize, hidden: &Matrix, rows: &[usize]) -> (Matrix, Matrix, Matrix) {
        let w = &self.layers[layer];
        let d = self.config.d_model;
        let mut q = Matrix::zeros(rows.len(), d);
        let mut k = Matrix::zeros(rows.len(), d);
        let mut v = Matrix::zeros(rows.len(), d);
        let mut normed = vec![0.0f32; d];
        for (r, &i) in rows.iter().enumerate() {
            layer_norm(hidden.row(i), &w.ln1, &mut normed);
            vec_matmul_into(&normed, &w.wq, q.row_mut(r));
            vec_matmul_into(&normed, &w.wk, k.row_mut(r));
            vec_matmul_into(&normed, &w.wv, v.row_mut(r));
            rotate_row(q.row_mut(r), i, &self.freqs, Direction::Forward);
            rotate_row(k.row_mut(r), i, &self.freqs, Direction::Forward);
        }
        (q, k, v)
    }

    /// Causal attention of each query over the live keys at or before it.
    fn attend(&self, q: &Matrix, queries: &[usize], k: &Matrix, v: &Matrix, keys: &[usize], trail_from: usize) -> Attention {
        let t = k.rows();
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let n_heads = self.config.n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = Matrix::zeros(queries.len(), d);
        let mut avg = vec![0.0f64; t];
        let mut trailing = vec![0.0f64; t];
        let n_trailing = queries.iter().filter(|&&i| i >= trail_from).count();
        let mut scores = Vec::with_capacity(keys.len());
        for (r, &i) in queries.iter().enumerate() {
            let visible = &keys[..keys.partition_point(|&j| j <= i)];
            let qi = q.row(r);
            for h in 0..n_heads {
                let span = h * hd..(h + 1) * hd;
                let qh = &qi[span.clone()];
                scores.clear();
                scores.extend(visible.iter().map(|&j| {
                    let kh = &k.row(j)[span.clone()];
                    qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale
                }));
                softmax_in_place(&mut scores);
                let o = &mut out.row_mut(r)[span.clone()];
                for (&j, &p) in visible.iter().zip(&scores) {
                    for (x, &y) in o.iter_mut().zip(&v.row(j)[span.clone()]) {
                        *x += p * y;
                    }
                    let share = p as f64 / n_heads as f64;
                    avg[j] += share;
                    if i >= trail_from {
                        trailing[j] += share;
                    }
                }
            }
        }
        let n = queries.len().max(1) as f64;
        let nt = n_trailing.max(1) as f64;
        Attention {
            out,
            avg: avg.iter().map(|&a| (a / n) as f32).collect(),
            trailing: trailing.iter().map(|&a| (a / nt) as f32).collect(),
        }
    }

    pub(crate) fn logits_for(&self, hidden: &Matrix, rows: &[usize]) -> Matrix {
        let mut logits = Matrix::zeros(rows.len(), self.config.vocab_size);
        let mut normed = vec![0.0f32; self.config.d_model];
        for (r, &i) in rows.iter().enumerate() {
            layer_norm(hidden.row(i), &self.ln_f, &mut normed);
            vec_matmul_into(&normed, &self.w_out, logits.row_mut(r));
        }
        logits
    }

    /// Attention probabilities of one query row at `layer` in a plain
    /// prefill, one vector per head. Used to check normalisation.
    pub fn attention_rows(&self, tokens: &[u32], layer: usize, query: usize) -> Result<Vec<Vec<f32>>> {
        if layer >= self.config.n_layers || query >= tokens.len() {
            return Err(Error::IndexOutOfRange { index: layer.max(query), len: tokens.len() });
        }
        let out = self.full_prefill(tokens)?;
        let mut hidden = self.embed(tokens)?;
        // Rebuild the layer input by replaying earlier layers on all rows.
        let all: Vec<usize> = (0..tokens.len()).collect();
        for l in 0..layer {
            let (q, _, _) = self.project(l, &hidden, &all);
            let (k, v) = &out.per_layer_kv[l];
            let att = self.attend(&q, &all, k, v, &all, 0);
            self.finish_rows(l, &mut hidden, &all, &att.out);
        }
        let (q, _, _) = self.project(layer, &hidden, &[query]);
        let (k, _) = &out.per_layer_kv[layer];
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        Ok((0..self.config.n_heads)
            .map(|h| {
                let span = h * hd..(h + 1) * hd;
                let mut s: Vec<f32> = (0..=query)
                    .map(|j| q.row(0)[span.clone()].iter().zip(&k.row(j)[span.clone()]).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                softmax_in_place(&mut s);
                s
            })
            .collect())
    }

    fn finish_rows(&self, layer: usize, hidden: &mut Matrix, rows: &[usize], attn_out: &Matrix) {
        let w = &self.layers[layer];
        let d = self.config.d_model;
        let mut proj = vec![0.0f32; d];
        let mut normed = vec![0.0f32; d];
        let mut ff = vec![0.0f32; 4 * d];
        for (r, &i) in rows.iter().enumerate() {
            vec_matmul_into(attn_out.row(r), &w.wo, &mut proj);
            let h = hidden.row_mut(i);
            for (x, p) in h.iter_mut().zip(&proj) {
                *x += p;
            }
            layer_norm(h, &w.ln2, &mut normed);
            vec_matmul_into(&normed, &w.w1, &mut ff);
            for (a, b) in ff.iter_mut().zip(&w.b1) {
                *a = gelu(*a + b);
            }
            vec_matmul_into(&ff, &w.w2, &mut proj);
            for ((x, p), b) in h.iter_mut().zip(&proj).zip(&w.b2) {
                *x += p + b;
            }
        }
    }
}
