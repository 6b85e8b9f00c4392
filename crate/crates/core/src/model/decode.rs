use super::{ModelEngine, ForwardOutput};
use crate::error::{Error, Result};
use crate::rope::{rotate_row, Direction};
use crate::tensor::{softmax_in_place, vec_matmul_into, Matrix};

/// Growing per-layer cache seeded from a prefill's live rows.
struct DecodeCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: Vec<usize>,
    next_pos: usize,
}

impl DecodeCache {
    fn from_prefill(out: &ForwardOutput, max_rows: usize) -> Self {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut len = Vec::new();
        for ((k, v), live) in out.per_layer_kv.iter().zip(&out.live) {
            let d = k.cols();
            let mut kk = Vec::with_capacity((live.len() + max_rows) * d);
            let mut vv = Vec::with_capacity((live.len() + max_rows) * d);
            for &i in live {
                kk.extend_from_slice(k.row(i));
                vv.extend_from_slice(v.row(i));
            }
            keys.push(kk);
            values.push(vv);
            len.push(live.len());
        }
        Self { keys, values, len, next_pos: out.len() }
    }
}

fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

impl ModelEngine {
    /// Greedy continuation of a prefill; ties go to the lowest id.
    pub fn decode_greedy(&self, out: &ForwardOutput, n_new: usize) -> Result<Vec<u32>> {
        if n_new == 0 {
            return Ok(Vec::new());
        }
        self.check_prefill(out, n_new)?;
        let mut cache = DecodeCache::from_prefill(out, n_new);
        let mut generated = vec![argmax(out.last_logits())];
        while generated.len() < n_new {
            let logits = self.step(&mut cache, *generated.last().expect("nonempty"));
            generated.push(argmax(&logits));
        }
        Ok(generated)
    }

    /// Teacher-forced logits: row 0 is the prefill's last row, row `i` the
    /// logits after feeding `continuation[..i]`.
    pub fn continuation_logits(&self, out: &ForwardOutput, continuation: &[u32]) -> Result<Matrix> {
        self.check_prefill(out, continuation.len())?;
        if let Some(&id) = continuation.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        let mut cache = DecodeCache::from_prefill(out, continuation.len());
        let mut rows = vec![out.last_logits().to_vec()];
        for &tok in continuation {
            rows.push(self.step(&mut cache, tok));
        }
        Matrix::from_rows(&rows)
    }

    fn check_prefill(&self, out: &ForwardOutput, extra: usize) -> Result<()> {
        if out.per_layer_kv.len() != self.config.n_layers || out.logit_positions.last() != Some(&(out.len().wrapping_sub(1))) {
            return Err(Error::Shape("prefill output does not belong to this engine".into()));
        }
        let needed = out.len() + extra;
        if needed > self.config.max_seq_len {
            return Err(Error::CacheExhausted { needed, max: self.config.max_seq_len });
        }
        Ok(())
    }

    /// Feed one token at the next position and return its logits.
    fn step(&self, cache: &mut DecodeCache, token: u32) -> Vec<f32> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let pos = cache.next_pos;
        let mut x = self.tok_emb.row(token as usize).to_vec();
        let mut normed = vec![0.0f32; d];
        let mut q = vec![0.0f32; d];
        let mut k = vec![0.0f32; d];
        let mut v = vec![0.0f32; d];
        let mut attn = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut ff = vec![0.0f32; 4 * d];
        for (l, w) in self.layers.iter().enumerate() {
            super::layer_norm(&x, &w.ln1, &mut normed);
            vec_matmul_into(&normed, &w.wq, &mut q);
            vec_matmul_into(&normed, &w.wk, &mut k);
            vec_matmul_into(&normed, &w.wv, &mut v);
            rotate_row(&mut q, pos, &self.freqs, Direction::Forward);
            rotate_row(&mut k, pos, &self.freqs, Direction::Forward);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            cache.len[l] += 1;
            let n = cache.len[l];
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            attn.iter_mut().for_each(|a| *a = 0.0);
            for h in 0..self.config.n_heads {
                let off = h * hd;
                let mut s: Vec<f32> = (0..n)
                    .map(|j| q[off..off + hd].iter().zip(&keys[j * d + off..j * d + off + hd]).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                softmax_in_place(&mut s);
                for (j, &p) in s.iter().enumerate() {
                    for (o, &y) in attn[off..off + hd].iter_mut().zip(&values[j * d + off..j * d + off + hd]) {
                        *o += p * y;
                    }
                }
            }
            vec_matmul_into(&attn, &w.wo, &mut proj);
            for (a, p) in x.iter_mut().zip(&proj) {
                *a += p;
            }
            super::layer_norm(&x, &w.ln2, &mut normed);
            vec_matmul_into(&normed, &w.w1, &mut ff);
            for (a, b) in ff.iter_mut().zip(&w.b1) {
                *a = super::gelu(*a + b);
            }
            vec_matmul_into(&ff, &w.w2, &mut proj);
            for ((a, p), b) in x.iter_mut().zip(&proj).zip(&w.b2) {
                *a += p + b;
            }
        }
        cache.next_pos += 1;
        super::layer_norm(&x.clone(), &self.ln_f, &mut x);
        let mut logits = vec![0.0f32; self.config.vocab_size];
        vec_matmul_into(&x, &self.w_out, &mut logits);
        logits
    }
}
