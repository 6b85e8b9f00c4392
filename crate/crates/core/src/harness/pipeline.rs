use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Ablation, ExperimentConfig};
use super::report::{RunReport, SCHEMA_VERSION};
use crate::error::{Error, Result, StageExt};
use crate::lsh::{MatchMap, SimilarityScore};
use crate::metrics::{cache_bytes, perplexity, rouge_l};
use crate::model::{detokenize, tokenize, ForwardOutput, ModelEngine};
use crate::recompute::{classify_hot_cold, HotColdSplit};
use crate::schedule::{plan_schedule, LayerSchedule};
use crate::store::{rearrange, CacheStore, Matcher, RearrangedCache, RopeMode, StoredKV};
use crate::tensor::Matrix;

/// Full-cache prefill and generation of one target, shared by every
/// variant run against it.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub tokens: Vec<u32>,
    pub e_cache: Matrix,
    pub full: ForwardOutput,
    pub generated: Vec<u32>,
}

/// Everything one shared-cache run produced.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub report: RunReport,
    pub reference: Option<(u64, SimilarityScore)>,
    pub match_map: Option<MatchMap>,
    pub split: Option<HotColdSplit>,
    pub schedule: LayerSchedule,
    pub injected: Option<RearrangedCache>,
    pub shared: ForwardOutput,
    pub generated: Vec<u32>,
}

pub struct Pipeline {
    config: ExperimentConfig,
    engine: ModelEngine,
    matcher: Matcher,
    store: CacheStore,
}

fn ids_text(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Std of every element of `m` (population).
fn element_std(m: &Matrix) -> f64 {
    let xs = m.as_slice();
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        Self::with_store(config, CacheStore::new())
    }

    pub fn with_store(config: ExperimentConfig, store: CacheStore) -> Result<Self> {
        config.validate()?;
        let engine = ModelEngine::new(config.model.clone())?;
        let mut matcher = Matcher::new(config.lsh.clone(), config.model.d_model, config.model.rope_base)?;
        matcher.max_distance = config.max_distance;
        Ok(Self { config, engine, matcher, store })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn engine(&self) -> &ModelEngine {
        &self.engine
    }

    pub fn matcher(&self) -> &Matcher {
        &self.matcher
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    pub fn into_store(self) -> CacheStore {
        self.store
    }

    /// Prefill `text` and store its E cache, KV cache and first-layer
    /// attention.
    pub fn register(&mut self, text: &str) -> Result<u64> {
        let tokens = tokenize(text);
        let out = self.engine.full_prefill(&tokens).stage("register")?;
        let kv = StoredKV::from_forward(&out, self.config.rope_storage_mode, &self.engine.config().head_rope())?;
        let e = self.engine.embed(&tokens)?;
        let attn = out.per_layer_attn_avg[0].clone();
        self.store.register(text, tokens, e, kv, attn)
    }

    pub fn baseline(&self, text: &str) -> Result<Baseline> {
        let tokens = tokenize(text);
        let e_cache = self.engine.embed(&tokens).stage("tokenize")?;
        let full = self.engine.full_prefill(&tokens).stage("full prefill")?;
        let generated = self.engine.decode_greedy(&full, self.config.n_new_tokens).stage("decode")?;
        Ok(Baseline { tokens, e_cache, full, generated })
    }

    /// Run `text` with the configured ablation.
    pub fn run(&self, prompt_id: &str, text: &str) -> Result<RunReport> {
        let base = self.baseline(text)?;
        Ok(self.run_traced(prompt_id, "run", &base, self.config.ablation)?.report)
    }

    /// Retrieve, match, rearrange, prefill, decode and measure.
    pub fn run_traced(&self, prompt_id: &str, experiment: &str, base: &Baseline, ablation: Ablation) -> Result<RunTrace> {
        let cfg = &self.config;
        let t = base.tokens.len();
        let n_layers = cfg.model.n_layers;
        let ranked = self.store.rank_references(&base.e_cache, &self.matcher).stage("retrieve")?;
        let best = ranked.first().copied();
        let gated = best.filter(|(_, s)| s.value >= cfg.similarity_threshold);

        let (match_map, split, schedule, injected, shared) = match gated {
            None => (None, None, LayerSchedule::full(n_layers, t), None, base.full.clone()),
            Some((id, _)) => {
                let record = self.store.get(id)?;
                let map = self.matcher.match_map(&base.e_cache, &record.e_cache).stage("match")?;
                let mut injected = rearrange(&record.kv, &map, id, &self.engine.config().head_rope()).stage("rearrange")?;
                self.ablate(&mut injected, ablation)?;
                let attn: Vec<f32> = map.reference_indices().iter().map(|&r| record.layer_attn[r]).collect();
                let split = classify_hot_cold(&attn, cfg.hot_cold_thres).stage("classify")?;
                let schedule = plan_schedule(t, n_layers, Some(&split), &cfg.schedule_params()).stage("schedule")?;
                let shared = self.engine.prefill(&base.tokens, Some(&injected), &schedule).stage("shared prefill")?;
                (Some(map), Some(split), schedule, Some(injected), shared)
            }
        };

        let generated = self.engine.decode_greedy(&shared, cfg.n_new_tokens).stage("decode")?;
        let ppl = {
            let logits = self.engine.continuation_logits(&shared, &base.generated).stage("perplexity")?;
            let mut toks = vec![*base.tokens.last().expect("nonempty")];
            toks.extend_from_slice(&base.generated);
            perplexity(&logits, &toks)?
        };
        let head_rope = self.engine.config().head_rope();
        let flops_shared = cfg.model.count_prefill_flops(t, &schedule)?;
        let flops_full = cfg.model.count_prefill_flops(t, &LayerSchedule::full(n_layers, t))?;
        let bytes_shared = cache_bytes(&StoredKV::from_forward(&shared, RopeMode::PostRope, &head_rope)?);
        let bytes_full = cache_bytes(&StoredKV::from_forward(&base.full, RopeMode::PostRope, &head_rope)?);
        let score = best.map(|(_, s)| s).unwrap_or(SimilarityScore { value: 0.0, raw_distance: 0.0 });

        let report = RunReport {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.to_owned(),
            variant: if gated.is_some() { ablation.variant().to_owned() } else { "full".to_owned() },
            prompt_id: prompt_id.to_owned(),
            reference_id: gated.map(|(id, _)| id),
            similarity: score.value,
            raw_distance: score.raw_distance,
            fallback: gated.is_none(),
            tokens: t,
            attention_flops_shared: flops_shared.attention,
            attention_flops_full: flops_full.attention,
            flops_shared: flops_shared.total(),
            flops_full: flops_full.total(),
            cache_bytes_shared: bytes_shared,
            cache_bytes_full: bytes_full,
            sigma_kv_per_layer: shared.deviations.iter().map(|d| d.mean_sigma_kv()).collect(),
            recompute_per_layer: shared.recompute_trace.iter().map(Vec::len).collect(),
            live_per_layer: shared.live.iter().map(Vec::len).collect(),
            perplexity: ppl,
            rouge_l: rouge_l(&ids_text(&generated), &ids_text(&base.generated)),
            generated_text: detokenize(&generated),
        };
        report.check_finite()?;
        Ok(RunTrace { report, reference: best, match_map, split, schedule, injected, shared, generated })
    }

    /// Zero or randomise every injected row. Random rows are `N(0, s^2)`
    /// with `s` the element std of the reference matrix they replace.
    fn ablate(&self, cache: &mut RearrangedCache, ablation: Ablation) -> Result<()> {
        match ablation {
            Ablation::None => {}
            Ablation::Zero => {
                for (k, v) in &mut cache.layers {
                    k.as_mut_slice().fill(0.0);
                    v.as_mut_slice().fill(0.0);
                }
            }
            Ablation::Random => {
                let record = self.store.get(cache.source_id)?;
                for (l, ((k, v), (rk, rv))) in cache.layers.iter_mut().zip(record.kv.layers()).enumerate() {
                    for (j, (m, src)) in [(k, rk), (v, rv)].into_iter().enumerate() {
                        let normal = Normal::new(0.0f32, element_std(src) as f32).map_err(|e| Error::Shape(e.to_string()))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                        rng.set_stream((cache.source_id << 16) | ((l as u64) << 1) | j as u64);
                        m.as_mut_slice().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(())
    }
}
