//! Seeded toy decoder-only transformer.
//!
//! Pre-norm blocks: `x += Attn(LN(x))`, `x += MLP(LN(x))`, RoPE on queries
//! and keys per head, GELU MLP of width `4 * d_model`, byte tokenizer.
//! Weights are drawn uniformly from `[-0.05, 0.05]` with one ChaCha stream
//! per tensor, so a config always yields the same engine.

mod decode;
mod flops;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::RopeParams;
use crate::tensor::Matrix;

pub use flops::{count_prefill_flops, FlopCount};
pub use forward::ForwardOutput;

pub const INIT_SCALE: f32 = 0.05;
pub const LN_EPS: f32 = 1e-5;
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub seed: u64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 8, n_heads: 4, vocab_size: 260, rope_base: 10_000.0, seed: 0, max_seq_len: 4096 }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = zero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("head dim {} must be even", self.head_dim())));
        }
        if self.vocab_size < BYTE_VOCAB {
            return Err(Error::Config(format!("vocab_size {} below {BYTE_VOCAB}", self.vocab_size)));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::Config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }

    pub fn head_rope(&self) -> RopeParams {
        RopeParams { base: self.rope_base, dim: self.head_dim(), max_position: self.max_seq_len }
    }

    pub fn count_prefill_flops(&self, t: usize, schedule: &crate::schedule::LayerSchedule) -> Result<FlopCount> {
        count_prefill_flops(self, t, schedule)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerWeights {
    pub ln1: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: Vec<f32>,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ModelEngine {
    config: ModelConfig,
    tok_emb: Matrix,
    layers: Vec<LayerWeights>,
    ln_f: Vec<f32>,
    w_out: Matrix,
    freqs: Vec<f64>,
}

struct WeightStream {
    seed: u64,
    next_id: u64,
}

impl WeightStream {
    fn uniform(&mut self, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.next_id);
        self.next_id += 1;
        (0..n).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.uniform(rows * cols)).expect("sized by construction")
    }
}

impl ModelEngine {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = 4 * d;
        let mut ws = WeightStream { seed: config.seed, next_id: 0 };
        let tok_emb = ws.matrix(config.vocab_size, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1: vec![1.0; d],
                wq: ws.matrix(d, d),
                wk: ws.matrix(d, d),
                wv: ws.matrix(d, d),
                wo: ws.matrix(d, d),
                ln2: vec![1.0; d],
                w1: ws.matrix(d, ff),
                b1: ws.uniform(ff),
                w2: ws.matrix(ff, d),
                b2: ws.uniform(d),
            })
            .collect();
        let w_out = ws.matrix(d, config.vocab_size);
        let freqs = config.head_rope().frequencies();
        Ok(Self { config, tok_emb, layers, ln_f: vec![1.0; d], w_out, freqs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// CRC32 over every weight in a fixed order.
    pub fn weight_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut feed = |xs: &[f32]| {
            for x in xs {
                h.update(&x.to_le_bytes());
            }
        };
        feed(self.tok_emb.as_slice());
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                feed(m.as_slice());
            }
            for v in [&l.ln1, &l.ln2, &l.b1, &l.b2] {
                feed(v);
            }
        }
        feed(&self.ln_f);
        feed(self.w_out.as_slice());
        h.finalize()
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.tok_emb.row(t as usize));
        }
        Ok(out)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::CacheExhausted { needed: tokens.len(), max: self.config.max_seq_len });
        }
        Ok(())
    }
}

/// One id per byte.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped and invalid UTF-8 is
/// replaced.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < BYTE_VOCAB as u32).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub(crate) fn layer_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = (v - mean) * inv * g;
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_config_same_weights() {
        let a = ModelEngine::new(ModelConfig::default()).unwrap();
        let b = ModelEngine::new(ModelConfig::default()).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        let c = ModelEngine::new(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn config_checks() {
        let cfg = ModelConfig { d_model: 64, n_heads: 4, n_layers: 4, ..Default::default() };
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 16);
        assert!(ModelConfig { d_model: 60, n_heads: 8, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { d_model: 6, n_heads: 2, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 100, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn weights_in_range() {
        let e = ModelEngine::new(ModelConfig { n_layers: 1, ..Default::default() }).unwrap();
        assert!(e.tok_emb.as_slice().iter().all(|w| w.abs() <= INIT_SCALE));
        assert!(e.layers[0].b1.iter().all(|w| w.abs() <= INIT_SCALE));
    }

    #[test]
    fn bytes_round_trip() {
        assert_eq!(tokenize("A"), vec![65]);
        assert_eq!(tokenize("AB"), vec![65, 66]);
        for s in ["", "héllo wörld", "line\nbreak\t"] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
        assert_eq!(detokenize(&[72, 257, 105]), "Hi");
    }

    #[test]
    fn embedding_is_a_lookup() {
        let e = ModelEngine::new(ModelConfig { n_layers: 1, ..Default::default() }).unwrap();
        let toks = [5, 9, 1, 5, 3, 3, 2, 5];
        let m = e.embed(&toks).unwrap();
        assert_eq!(m.rows(), 8);
        assert_eq!(m.row(0), m.row(3));
        assert_eq!(m.row(3), m.row(7));
        assert_ne!(m.row(0), m.row(1));
        assert!(matches!(e.embed(&[260]), Err(Error::TokenOutOfRange { id: 260, .. })));
        assert!(e.embed(&[]).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_unit_variance() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        layer_norm(&x, &[1.0; 4], &mut out);
        let mean: f32 = out.iter().sum::<f32>() / 4.0;
        let var: f32 = out.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
    }
}
