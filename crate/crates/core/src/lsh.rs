//! Euclidean locality-sensitive hashing.
//!
//! Each of `n_tables` tables concatenates `hashes_per_table` scalar
//! quantized projections `floor((x . r + b) / w)` with Gaussian `r` and
//! `b ~ U[0, w)`. Matching takes the union of a query's buckets across all
//! tables as the candidate set, optionally re-ranks it by exact Euclidean
//! distance, and falls back to brute force when no bucket is shared.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_distance, Matrix};

/// Normalisation constants of the prompt similarity score.
pub const MIN_DISTANCE: f64 = 0.0;
pub const MAX_DISTANCE: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshConfig {
    pub n_tables: usize,
    pub hashes_per_table: usize,
    pub hash_width: f32,
    pub seed: u64,
    pub rerank: bool,
    pub brute_force_fallback: bool,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self {
            n_tables: 8,
            hashes_per_table: 4,
            hash_width: 4.0,
            seed: 0x5eed_15a4,
            rerank: true,
            brute_force_fallback: true,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tables == 0 || self.hashes_per_table == 0 {
            return Err(Error::Config("lsh needs at least one table and one hash".into()));
        }
        if !(self.hash_width > 0.0) || !self.hash_width.is_finite() {
            return Err(Error::Config(format!("lsh hash width {} must be > 0", self.hash_width)));
        }
        Ok(())
    }
}

pub type BucketKey = Vec<i64>;

/// The seeded projections `(r, b)` for every table.
#[derive(Clone, Debug)]
pub struct LshFamily {
    config: LshConfig,
    dim: usize,
    // tables x hashes x dim, row-major
    projections: Vec<f32>,
    offsets: Vec<f32>,
}

impl LshFamily {
    pub fn new(config: &LshConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Empty("lsh vectors have zero width"));
        }
        let n_hashes = config.n_tables * config.hashes_per_table;
        let mut projections = Vec::with_capacity(n_hashes * dim);
        let mut offsets = Vec::with_capacity(n_hashes);
        for table in 0..config.n_tables {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(table as u64);
            for _ in 0..config.hashes_per_table {
                projections.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)));
                offsets.push(rng.random_range(0.0..config.hash_width));
            }
        }
        Ok(Self { config: config.clone(), dim, projections, offsets })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    /// Bucket key of `v` in table `table`.
    pub fn hash(&self, v: &[f32], table: usize) -> Result<BucketKey> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector width {} vs index width {}", v.len(), self.dim)));
        }
        if table >= self.config.n_tables {
            return Err(Error::IndexOutOfRange { index: table, len: self.config.n_tables });
        }
        let k = self.config.hashes_per_table;
        let w = self.config.hash_width;
        Ok((0..k)
            .map(|j| {
                let h = table * k + j;
                let r = &self.projections[h * self.dim..(h + 1) * self.dim];
                quantize(dot(v, r), self.offsets[h], w)
            })
            .collect())
    }
}

/// `floor((projection + offset) / width)`.
#[inline]
pub fn quantize(projection: f32, offset: f32, width: f32) -> i64 {
    ((projection + offset) / width).floor() as i64
}

/// Convenience wrapper: hash `v` into `table` with a freshly seeded family.
pub fn hash_vector(v: &[f32], table: usize, config: &LshConfig) -> Result<BucketKey> {
    LshFamily::new(config, v.len())?.hash(v, table)
}

#[derive(Clone, Debug)]
pub struct LshIndex {
    family: LshFamily,
    vectors: Matrix,
    tables: Vec<HashMap<BucketKey, Vec<usize>>>,
}

pub fn build_index(vectors: &Matrix, config: &LshConfig) -> Result<LshIndex> {
    LshIndex::build(vectors, config)
}

impl LshIndex {
    pub fn build(vectors: &Matrix, config: &LshConfig) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::Empty("cannot index zero vectors"));
        }
        let family = LshFamily::new(config, vectors.cols())?;
        let mut tables = vec![HashMap::<BucketKey, Vec<usize>>::new(); config.n_tables];
        for (i, v) in vectors.iter_rows().enumerate() {
            for (t, table) in tables.iter_mut().enumerate() {
                table.entry(family.hash(v, t)?).or_default().push(i);
            }
        }
        Ok(Self { family, vectors: vectors.clone(), tables })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn bucket(&self, table: usize, key: &BucketKey) -> &[usize] {
        self.tables[table].get(key).map_or(&[], Vec::as_slice)
    }

    /// Candidate indices sharing at least one bucket with `q`, with the number
    /// of tables each collided in. Sorted by index.
    pub fn candidates(&self, q: &[f32]) -> Result<Vec<(usize, usize)>> {
        let mut hits = vec![0usize; self.len()];
        for t in 0..self.tables.len() {
            let key = self.family.hash(q, t)?;
            for &i in self.bucket(t, &key) {
                hits[i] += 1;
            }
        }
        Ok(hits.into_iter().enumerate().filter(|&(_, h)| h > 0).collect())
    }

    /// Nearest indexed vector to `q` under the configured policy.
    pub fn query(&self, q: &[f32]) -> Result<(usize, f32)> {
        let cfg = self.family.config();
        let candidates = self.candidates(q)?;
        if candidates.is_empty() {
            if cfg.brute_force_fallback {
                return Ok(self.exact_nearest(q));
            }
            return Ok((0, l2_distance(q, self.vectors.row(0))));
        }
        if cfg.rerank {
            let mut best = (usize::MAX, f32::INFINITY);
            for &(i, _) in &candidates {
                let d = l2_distance(q, self.vectors.row(i));
                if d < best.1 {
                    best = (i, d);
                }
            }
            Ok(best)
        } else {
            // Most collisions wins; candidates are index-sorted so the first
            // maximum is the lowest index.
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if c.1 > best.1 {
                    best = c;
                }
            }
            Ok((best.0, l2_distance(q, self.vectors.row(best.0))))
        }
    }

    fn exact_nearest(&self, q: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for (i, v) in self.vectors.iter_rows().enumerate() {
            let d = l2_distance(q, v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub target: usize,
    pub reference: usize,
    pub distance: f32,
}

/// One entry per target token, ordered by target index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchMap {
    pairs: Vec<MatchPair>,
}

impl MatchMap {
    pub fn new(pairs: Vec<MatchPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.target != i {
                return Err(Error::Shape(format!("match entry {i} has target index {}", p.target)));
            }
            if !(p.distance >= 0.0) {
                return Err(Error::Shape(format!("negative match distance at {i}")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn identity(len: usize) -> Self {
        Self::from_references(&(0..len).collect::<Vec<_>>())
    }

    /// Zero-distance map with the given reference index per target token.
    pub fn from_references(refs: &[usize]) -> Self {
        Self {
            pairs: refs
                .iter()
                .enumerate()
                .map(|(target, &reference)| MatchPair { target, reference, distance: 0.0 })
                .collect(),
        }
    }

    pub fn pairs(&self) -> &[MatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn reference_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.reference).collect()
    }

    pub fn mean_distance(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.distance as f64).sum::<f64>() / self.pairs.len() as f64
    }

    pub fn is_identity(&self) -> bool {
        self.pairs.iter().all(|p| p.reference == p.target)
    }
}

/// Map every target row to its nearest reference row.
pub fn match_tokens(target: &Matrix, reference: &Matrix, config: &LshConfig) -> Result<MatchMap> {
    if target.rows() == 0 || reference.rows() == 0 {
        return Err(Error::Empty("match_tokens needs nonempty matrices"));
    }
    if target.cols() != reference.cols() {
        return Err(Error::Shape(format!(
            "target width {} vs reference width {}",
            target.cols(),
            reference.cols()
        )));
    }
    let index = LshIndex::build(reference, config)?;
    let pairs = target
        .iter_rows()
        .enumerate()
        .map(|(t, row)| {
            let (reference, distance) = index.query(row)?;
            Ok(MatchPair { target: t, reference, distance })
        })
        .collect::<Result<Vec<_>>>()?;
    MatchMap::new(pairs)
}

/// Mean matched Euclidean distance from target rows to reference rows.
pub fn prompt_distance(target: &Matrix, reference: &Matrix, config: &LshConfig) -> Result<f64> {
    Ok(match_tokens(target, reference, config)?.mean_distance())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub raw_distance: f64,
}

/// `clip(1 - (d - 0) / (30 - 0), 0, 1)`.
pub fn similarity_score(raw_distance: f64) -> SimilarityScore {
    similarity_score_with(raw_distance, MIN_DISTANCE, MAX_DISTANCE)
}

pub fn similarity_score_with(raw_distance: f64, min_dist: f64, max_dist: f64) -> SimilarityScore {
    let d_norm = (raw_distance - min_dist) / (max_dist - min_dist);
    SimilarityScore { value: (1.0 - d_norm).clamp(0.0, 1.0), raw_distance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Rows drawn like the toy model's embedding table, the vectors the
    /// index sees in practice.
    fn embedding_scale_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-0.05f32..=0.05)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Exhaustive nearest neighbour, lowest index on ties.
    fn oracle_nn(q: &[f32], refs: &Matrix) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for i in 0..refs.rows() {
            let d: f32 = q.iter().zip(refs.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn same_vector_same_keys() {
        let cfg = LshConfig::default();
        let v: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        for t in 0..cfg.n_tables {
            assert_eq!(hash_vector(&v, t, &cfg).unwrap(), hash_vector(&v, t, &cfg).unwrap());
        }
    }

    #[test]
    fn floor_arithmetic() {
        assert_eq!(quantize(0.1, 0.2, 1.0), 0);
        assert_eq!(quantize(-0.1, 0.0, 1.0), -1);
        assert_eq!(quantize(2.5, 0.0, 1.0), 2);
    }

    #[test]
    fn offsets_within_width() {
        let cfg = LshConfig { hash_width: 0.5, ..LshConfig::default() };
        let fam = LshFamily::new(&cfg, 8).unwrap();
        assert!(fam.offsets.iter().all(|&b| (0.0..0.5).contains(&b)));
    }

    #[test]
    fn table_index_out_of_range() {
        let cfg = LshConfig::default();
        assert!(hash_vector(&[1.0, 2.0], cfg.n_tables, &cfg).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let fam = LshFamily::new(&LshConfig::default(), 4).unwrap();
        assert!(matches!(fam.hash(&[1.0; 5], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn near_pairs_collide_more_often_than_far_pairs() {
        let cfg = LshConfig { n_tables: 1, hashes_per_table: 1, ..LshConfig::default() };
        let w = cfg.hash_width;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut near, mut far) = (0, 0);
        for trial in 0..1000u64 {
            let fam = LshFamily::new(&LshConfig { seed: trial, ..cfg.clone() }, 16).unwrap();
            let x: Vec<f32> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            let dir: Vec<f32> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::tensor::l2_norm(&dir);
            let at = |r: f32| -> Vec<f32> { x.iter().zip(&dir).map(|(a, d)| a + d / n * r).collect() };
            let hx = fam.hash(&x, 0).unwrap();
            near += (fam.hash(&at(w / 4.0), 0).unwrap() == hx) as usize;
            far += (fam.hash(&at(4.0 * w), 0).unwrap() == hx) as usize;
        }
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn empty_index_rejected() {
        assert!(build_index(&Matrix::zeros(0, 4), &LshConfig::default()).is_err());
    }

    #[test]
    fn single_vector_always_returned() {
        let refs = random_matrix(1, 8, 1);
        let idx = build_index(&refs, &LshConfig::default()).unwrap();
        let queries = random_matrix(20, 8, 2);
        for q in queries.iter_rows() {
            assert_eq!(idx.query(q).unwrap().0, 0);
        }
        let cfg = LshConfig { brute_force_fallback: false, ..LshConfig::default() };
        let mm = match_tokens(&queries, &refs, &cfg).unwrap();
        assert!(mm.pairs().iter().all(|p| p.reference == 0));
    }

    #[test]
    fn rebuild_is_deterministic() {
        let v = random_matrix(64, 16, 3);
        let a = build_index(&v, &LshConfig::default()).unwrap();
        let b = build_index(&v, &LshConfig::default()).unwrap();
        assert_eq!(a.tables, b.tables);
    }

    #[test]
    fn self_query_recall_is_exact() {
        let v = random_matrix(256, 64, 4);
        let idx = build_index(&v, &LshConfig::default()).unwrap();
        for (i, row) in v.iter_rows().enumerate() {
            assert_eq!(idx.query(row).unwrap(), (i, 0.0));
        }
    }

    #[test]
    fn matching_against_oracle() {
        let cfg = LshConfig::default();
        let targets = embedding_scale_matrix(256, 64, 5);
        let refs = embedding_scale_matrix(256, 64, 6);
        let mm = match_tokens(&targets, &refs, &cfg).unwrap();
        let mut within = 0;
        for p in mm.pairs() {
            let (_, exact) = oracle_nn(targets.row(p.target), &refs);
            assert!(p.distance >= exact - 1e-5);
            if p.distance <= 1.2 * exact {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.9 * 256.0, "{within}/256 within 1.2x");
    }

    #[test]
    fn without_fallback_empty_candidates_map_to_zero() {
        // One far-away reference set: a query with no shared bucket falls to 0.
        let cfg = LshConfig {
            hash_width: 0.01,
            brute_force_fallback: false,
            ..LshConfig::default()
        };
        let refs = random_matrix(32, 8, 8);
        let q = Matrix::from_vec(1, 8, vec![100.0; 8]).unwrap();
        let mm = match_tokens(&q, &refs, &cfg).unwrap();
        assert_eq!(mm.pairs()[0].reference, 0);
    }

    #[test]
    fn width_mismatch_rejected() {
        let err = match_tokens(&Matrix::zeros(2, 4), &Matrix::zeros(2, 6), &LshConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn identical_prompts_have_zero_distance() {
        let v = random_matrix(40, 16, 9);
        let mm = match_tokens(&v, &v, &LshConfig::default()).unwrap();
        assert!(mm.is_identity());
        assert_eq!(prompt_distance(&v, &v, &LshConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn distance_grows_as_reference_moves_away() {
        let t = random_matrix(30, 16, 10);
        let base = random_matrix(30, 16, 12);
        let mut last = -1.0;
        for shift in [0.0f32, 1.0, 5.0, 25.0] {
            let moved: Vec<f32> = base.as_slice().iter().map(|x| x + shift).collect();
            let r = Matrix::from_vec(30, 16, moved).unwrap();
            let d = prompt_distance(&t, &r, &LshConfig::default()).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity_score(0.0).value, 1.0);
        assert_eq!(similarity_score(30.0).value, 0.0);
        assert_eq!(similarity_score(15.0).value, 0.5);
        assert_eq!(similarity_score(45.0).value, 0.0);
        assert_eq!(similarity_score(45.0).raw_distance, 45.0);
    }
}
