//! Prompt registry: E caches, stored KV caches, reference retrieval,
//! token-by-token rearrangement and the on-disk format.
//!
//! File layout (little endian):
//!
//! ```text
//! magic "SSKV" | version u32 | next_id u64 | n_records u64
//! per record: payload_len u64 | payload | crc32(payload) u32
//! ```
//!
//! A file is decoded completely before any record is returned.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{match_tokens, similarity_score_with, LshConfig, MatchMap, SimilarityScore, MAX_DISTANCE, MIN_DISTANCE};
use crate::model::ForwardOutput;
use crate::rope::{apply_rope_heads, encode_sequence, Direction, RopeParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SSKV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeMode {
    /// Keys stored rotated at their original positions.
    #[default]
    PostRope,
    /// Keys stored unrotated and injected unrotated.
    PreRope,
    /// Keys stored unrotated and rotated to the target position on reuse.
    PreRopeReapply,
}

impl RopeMode {
    pub const ALL: [RopeMode; 3] = [RopeMode::PostRope, RopeMode::PreRope, RopeMode::PreRopeReapply];

    pub fn as_str(self) -> &'static str {
        match self {
            RopeMode::PostRope => "post-rope",
            RopeMode::PreRope => "pre-rope",
            RopeMode::PreRopeReapply => "pre-rope-reapply",
        }
    }

    fn code(self) -> u8 {
        match self {
            RopeMode::PostRope => 0,
            RopeMode::PreRope => 1,
            RopeMode::PreRopeReapply => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => RopeMode::PostRope,
            1 => RopeMode::PreRope,
            2 => RopeMode::PreRopeReapply,
            _ => return Err(Error::Format(format!("unknown rope mode {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredKV {
    layers: Vec<(Matrix, Matrix)>,
    rope_mode: RopeMode,
    live_mask: Vec<Vec<bool>>,
}

impl StoredKV {
    /// All rows live.
    pub fn new(layers: Vec<(Matrix, Matrix)>, rope_mode: RopeMode) -> Result<Self> {
        if let Some((k, _)) = layers.first() {
            let (t, d) = (k.rows(), k.cols());
            if layers.iter().any(|(k, v)| k.rows() != t || v.rows() != t || k.cols() != d || v.cols() != d) {
                return Err(Error::Shape("stored layers differ in shape".into()));
            }
        }
        let live_mask = layers.iter().map(|(k, _)| vec![true; k.rows()]).collect();
        Ok(Self { layers, rope_mode, live_mask })
    }

    /// Cache of a prefill in the requested storage mode. `head_rope` must be
    /// the engine's per-head RoPE parameters.
    pub fn from_forward(out: &ForwardOutput, rope_mode: RopeMode, head_rope: &RopeParams) -> Result<Self> {
        let positions: Vec<usize> = (0..out.len()).collect();
        let layers = out
            .per_layer_kv
            .iter()
            .map(|(k, v)| {
                let k = match rope_mode {
                    RopeMode::PostRope => k.clone(),
                    _ => apply_rope_heads(k, &positions, head_rope, Direction::Inverse)?,
                };
                Ok((k, v.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut kv = Self::new(layers, rope_mode)?;
        let mask = out
            .live
            .iter()
            .map(|live| {
                let mut m = vec![false; out.len()];
                live.iter().for_each(|&i| m[i] = true);
                m
            })
            .collect();
        kv.set_live_mask(mask)?;
        Ok(kv)
    }

    pub fn layers(&self) -> &[(Matrix, Matrix)] {
        &self.layers
    }

    pub fn live_mask(&self) -> &[Vec<bool>] {
        &self.live_mask
    }

    pub fn rope_mode(&self) -> RopeMode {
        self.rope_mode
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Rows per layer.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_live_mask(&mut self, mask: Vec<Vec<bool>>) -> Result<()> {
        if mask.len() != self.layers.len() || mask.iter().any(|m| m.len() != self.len()) {
            return Err(Error::Shape("live mask does not match the stored layers".into()));
        }
        self.live_mask = mask;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub id: u64,
    pub text: String,
    pub tokens: Vec<u32>,
    pub e_cache: Matrix,
    pub kv: StoredKV,
    /// First-layer averaged attention of the prompt's own prefill.
    pub layer_attn: Vec<f32>,
}

/// Token-matching settings shared by retrieval and the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    pub lsh: LshConfig,
    /// Full-width RoPE applied to E caches before matching.
    pub rope: RopeParams,
    pub max_distance: f64,
}

impl Matcher {
    pub fn new(lsh: LshConfig, d_model: usize, rope_base: f64) -> Result<Self> {
        Ok(Self { lsh, rope: RopeParams::new(rope_base, d_model)?, max_distance: MAX_DISTANCE })
    }

    pub fn encode(&self, e_cache: &Matrix) -> Result<Matrix> {
        encode_sequence(e_cache, &self.rope)
    }

    /// Match raw (unencoded) E caches.
    pub fn match_map(&self, target_e: &Matrix, reference_e: &Matrix) -> Result<MatchMap> {
        match_tokens(&self.encode(target_e)?, &self.encode(reference_e)?, &self.lsh)
    }

    pub fn score(&self, map: &MatchMap) -> SimilarityScore {
        similarity_score_with(map.mean_distance(), MIN_DISTANCE, self.max_distance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RearrangedCache {
    pub layers: Vec<(Matrix, Matrix)>,
    pub source_id: u64,
    pub match_map: MatchMap,
}

/// Gather the reference rows named by `map` into target order. Reapply
/// mode rotates each gathered key to its target position.
pub fn rearrange(kv: &StoredKV, map: &MatchMap, source_id: u64, head_rope: &RopeParams) -> Result<RearrangedCache> {
    let refs = map.reference_indices();
    if let Some(&r) = refs.iter().find(|&&r| r >= kv.len()) {
        return Err(Error::IndexOutOfRange { index: r, len: kv.len() });
    }
    if let Some(mask) = kv.live_mask().first() {
        if let Some(&r) = refs.iter().find(|&&r| !mask[r]) {
            return Err(Error::Shape(format!("reference row {r} was evicted at the first layer")));
        }
    }
    let targets: Vec<usize> = (0..refs.len()).collect();
    let layers = kv
        .layers()
        .iter()
        .map(|(k, v)| {
            let mut k = k.gather_rows(&refs)?;
            if kv.rope_mode() == RopeMode::PreRopeReapply {
                k = apply_rope_heads(&k, &targets, head_rope, Direction::Forward)?;
            }
            Ok((k, v.gather_rows(&refs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RearrangedCache { layers, source_id, match_map: map.clone() })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheStore {
    records: Vec<PromptRecord>,
    next_id: u64,
}

impl CacheStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn register(&mut self, text: &str, tokens: Vec<u32>, e_cache: Matrix, kv: StoredKV, layer_attn: Vec<f32>) -> Result<u64> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Empty("prompt tokens"));
        }
        if e_cache.rows() != t || kv.len() != t || layer_attn.len() != t {
            return Err(Error::Shape(format!(
                "{t} tokens, {} E rows, {} KV rows, {} attention entries",
                e_cache.rows(),
                kv.len(),
                layer_attn.len()
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.records.push(PromptRecord { id, text: text.to_owned(), tokens, e_cache, kv, layer_attn });
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Result<&PromptRecord> {
        self.records.iter().find(|r| r.id == id).ok_or(Error::UnknownPrompt(id))
    }

    /// Best-scoring record at or above `threshold`; ties keep the earliest.
    pub fn retrieve_reference(&self, target_e: &Matrix, threshold: f64, matcher: &Matcher) -> Result<Option<(u64, SimilarityScore)>> {
        Ok(self.rank_references(target_e, matcher)?.into_iter().next().filter(|(_, s)| s.value >= threshold))
    }

    /// Every record with its score, best first.
    pub fn rank_references(&self, target_e: &Matrix, matcher: &Matcher) -> Result<Vec<(u64, SimilarityScore)>> {
        let target = matcher.encode(target_e)?;
        let mut scored = self
            .records
            .iter()
            .map(|r| {
                let map = match_tokens(&target, &matcher.encode(&r.e_cache)?, &matcher.lsh)?;
                Ok((r.id, matcher.score(&map)))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.1.value.total_cmp(&a.1.value).then(a.0.cmp(&b.0)));
        Ok(scored)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u64(&mut out, self.next_id);
        put_u64(&mut out, self.records.len() as u64);
        for r in &self.records {
            let payload = encode_record(r);
            put_u64(&mut out, payload.len() as u64);
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes };
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("not a cache store file".into()));
        }
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let next_id = rd.u64()?;
        let n = rd.u64()?;
        let mut records = Vec::new();
        for i in 0..n {
            let len = rd.len_prefix(1)?;
            let payload = rd.take(len)?;
            let crc = rd.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checksum { record: i as usize });
            }
            records.push(decode_record(payload)?);
        }
        if !rd.buf.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rd.buf.len())));
        }
        if let Some(r) = records.iter().find(|r| r.id >= next_id) {
            return Err(Error::Format(format!("record id {} not below next id {next_id}", r.id)));
        }
        Ok(Self { records, next_id })
    }
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    put_u64(out, xs.len() as u64);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_record(r: &PromptRecord) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, r.id);
    put_u64(&mut out, r.text.len() as u64);
    out.extend_from_slice(r.text.as_bytes());
    put_u64(&mut out, r.tokens.len() as u64);
    for t in &r.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    put_matrix(&mut out, &r.e_cache);
    out.push(r.kv.rope_mode().code());
    put_u64(&mut out, r.kv.n_layers() as u64);
    for ((k, v), mask) in r.kv.layers().iter().zip(r.kv.live_mask()) {
        put_matrix(&mut out, k);
        put_matrix(&mut out, v);
        put_u64(&mut out, mask.len() as u64);
        out.extend(mask.iter().map(|&m| m as u8));
    }
    put_f32s(&mut out, &r.layer_attn);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Format(format!("truncated: need {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count whose elements occupy `elem` bytes each, checked against the
    /// remaining input before anything is allocated.
    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        match usize::try_from(n).ok().and_then(|n| n.checked_mul(elem)) {
            Some(bytes) if bytes <= self.buf.len() => Ok(n as usize),
            _ => Err(Error::Format(format!("length {n} exceeds remaining input"))),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()?;
        let cols = self.u64()?;
        let n = usize::try_from(rows)
            .ok()
            .zip(usize::try_from(cols).ok())
            .and_then(|(r, c)| r.checked_mul(c).map(|n| (r, c, n)))
            .filter(|&(_, _, n)| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()));
        let (r, c, n) = n.ok_or_else(|| Error::Format(format!("matrix {rows}x{cols} exceeds remaining input")))?;
        Matrix::from_vec(r, c, self.f32s(n)?)
    }
}

fn decode_record(payload: &[u8]) -> Result<PromptRecord> {
    let mut rd = Reader { buf: payload };
    let id = rd.u64()?;
    let n = rd.len_prefix(1)?;
    let text = String::from_utf8(rd.take(n)?.to_vec()).map_err(|_| Error::Format("prompt text is not UTF-8".into()))?;
    let n = rd.len_prefix(4)?;
    let tokens = rd.take(n * 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let e_cache = rd.matrix()?;
    let mode = RopeMode::from_code(rd.u8()?)?;
    let n_layers = rd.len_prefix(1)?;
    let mut layers = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..n_layers {
        let k = rd.matrix()?;
        let v = rd.matrix()?;
        let n = rd.len_prefix(1)?;
        let m = rd
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("bad live flag {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push((k, v));
        mask.push(m);
    }
    let n = rd.len_prefix(4)?;
    let layer_attn = rd.f32s(n)?;
    if !rd.buf.is_empty() {
        return Err(Error::Format("record has trailing bytes".into()));
    }
    let mut kv = StoredKV::new(layers, mode)?;
    kv.set_live_mask(mask)?;
    let record = PromptRecord { id, text, tokens, e_cache, kv, layer_attn };
    let t = record.tokens.len();
    if record.e_cache.rows() != t || record.kv.len() != t || record.layer_attn.len() != t {
        return Err(Error::Format(format!("record {id} has inconsistent lengths")));
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::MatchPair;
    use crate::model::{tokenize, ModelConfig, ModelEngine};
    use crate::rope::apply_rope_heads;

    fn engine() -> ModelEngine {
        ModelEngine::new(ModelConfig { n_layers: 2, ..Default::default() }).unwrap()
    }

    fn register(store: &mut CacheStore, e: &ModelEngine, text: &str, mode: RopeMode) -> u64 {
        let toks = tokenize(text);
        let out = e.full_prefill(&toks).unwrap();
        let kv = StoredKV::from_forward(&out, mode, &e.config().head_rope()).unwrap();
        store.register(text, toks.clone(), e.embed(&toks).unwrap(), kv, out.per_layer_attn_avg[0].clone()).unwrap()
    }

    fn matcher() -> Matcher {
        Matcher::new(LshConfig::default(), 64, 10_000.0).unwrap()
    }

    #[test]
    fn register_and_fetch() {
        let e = engine();
        let mut s = CacheStore::new();
        let a = register(&mut s, &e, "first prompt.", RopeMode::PostRope);
        let b = register(&mut s, &e, "second prompt.", RopeMode::PostRope);
        assert_ne!(a, b);
        assert_eq!(s.get(a).unwrap().text, "first prompt.");
        assert!(matches!(s.get(99), Err(Error::UnknownPrompt(99))));
    }

    #[test]
    fn register_rejects_mismatch() {
        let kv = StoredKV::new(vec![(Matrix::zeros(3, 4), Matrix::zeros(3, 4))], RopeMode::PostRope).unwrap();
        let mut s = CacheStore::new();
        assert!(s.register("x", vec![1, 2], Matrix::zeros(2, 4), kv, vec![0.5; 2]).is_err());
    }

    #[test]
    fn retrieval() {
        let e = engine();
        let m = matcher();
        let mut s = CacheStore::new();
        assert!(s.retrieve_reference(&e.embed(&tokenize("abc")).unwrap(), 0.8, &m).unwrap().is_none());
        let text = "A small prompt about cats.";
        register(&mut s, &e, "Something else entirely, longer.", RopeMode::PostRope);
        let id = register(&mut s, &e, text, RopeMode::PostRope);
        let (got, score) = s.retrieve_reference(&e.embed(&tokenize(text)).unwrap(), 0.8, &m).unwrap().unwrap();
        assert_eq!(got, id);
        assert_eq!(score.value, 1.0);
        assert!(s.retrieve_reference(&e.embed(&tokenize(text)).unwrap(), 1.5, &m).unwrap().is_none());
    }

    #[test]
    fn identity_rearrange_copies() {
        let e = engine();
        let mut s = CacheStore::new();
        let id = register(&mut s, &e, "copy me exactly", RopeMode::PostRope);
        let rec = s.get(id).unwrap();
        let re = rearrange(&rec.kv, &MatchMap::identity(rec.tokens.len()), id, &e.config().head_rope()).unwrap();
        assert_eq!(re.layers, rec.kv.layers());
        let zeros = MatchMap::from_references(&vec![0; 5]);
        let re = rearrange(&rec.kv, &zeros, id, &e.config().head_rope()).unwrap();
        for r in 0..5 {
            assert_eq!(re.layers[1].0.row(r), rec.kv.layers()[1].0.row(0));
        }
        let oob = MatchMap::new(vec![MatchPair { target: 0, reference: 99, distance: 0.0 }]).unwrap();
        assert!(matches!(rearrange(&rec.kv, &oob, id, &e.config().head_rope()), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn reapply_rotates_to_target_position() {
        let e = engine();
        let hr = e.config().head_rope();
        let toks = tokenize("rotate these keys");
        let out = e.full_prefill(&toks).unwrap();
        let pre = StoredKV::from_forward(&out, RopeMode::PreRopeReapply, &hr).unwrap();
        // identity map: reapplying at the same positions restores the native keys
        let re = rearrange(&pre, &MatchMap::identity(toks.len()), 0, &hr).unwrap();
        assert!(re.layers[0].0.max_abs_diff(&out.per_layer_kv[0].0) < 1e-5);
        // shifted map: row t holds reference row t-1 rotated to position t
        let refs: Vec<usize> = (0..toks.len()).map(|t| t.saturating_sub(1)).collect();
        let re = rearrange(&pre, &MatchMap::from_references(&refs), 0, &hr).unwrap();
        let raw = pre.layers()[1].0.gather_rows(&refs).unwrap();
        let want = apply_rope_heads(&raw, &(0..toks.len()).collect::<Vec<_>>(), &hr, Direction::Forward).unwrap();
        assert_eq!(re.layers[1].0, want);
    }

    #[test]
    fn round_trip_bytes() {
        let e = engine();
        let mut s = CacheStore::new();
        assert_eq!(CacheStore::from_bytes(&s.to_bytes()).unwrap(), s);
        register(&mut s, &e, "persist me.", RopeMode::PreRope);
        register(&mut s, &e, "and me!", RopeMode::PostRope);
        let back = CacheStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corruption_detected() {
        let e = engine();
        let mut s = CacheStore::new();
        register(&mut s, &e, "persist me.", RopeMode::PostRope);
        let bytes = s.to_bytes();
        let mut bad = bytes.clone();
        bad[100] ^= 0x10;
        assert!(matches!(CacheStore::from_bytes(&bad), Err(Error::Checksum { record: 0 })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(CacheStore::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(CacheStore::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(CacheStore::from_bytes(b"NOPE"), Err(Error::Format(_))));
    }

    #[test]
    fn huge_length_prefix_rejected() {
        let mut bytes = CacheStore::new().to_bytes();
        bytes[16..24].copy_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(CacheStore::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
