use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, ExperimentConfig, PerturbMode};
use super::corpus::{load_corpus, synthetic_corpus, CorpusEntry};
use super::perturb::{perturb_corpus, perturb_text, sentence_pool, PromptPair};
use super::pipeline::Pipeline;
use super::report::{write_text, Format, RunReport};
use crate::error::{Error, Result, StageExt};
use crate::metrics::{hd_overlap, kv_deviation, perplexity, spearman_adjacent, Correlation};
use crate::model::{tokenize, ModelEngine};
use crate::recompute::attention_recovery;
use crate::retention::PatternKind;
use crate::schedule::{plan_schedule, LayerSchedule, RetentionShape, ScheduleParams};
use crate::store::{rearrange, Matcher, RopeMode, StoredKV};

/// Configured corpus, or the synthetic one sized to `perturb.pairs`.
pub fn load_or_synthetic(config: &ExperimentConfig) -> Result<Vec<CorpusEntry>> {
    match &config.corpus {
        Some(p) => load_corpus(p).stage("corpus"),
        None => Ok(synthetic_corpus(config.perturb.pairs, config.seed)),
    }
}

/// Perturbed pairs over the first `perturb.pairs` entries.
pub fn corpus_pairs(config: &ExperimentConfig, corpus: &[CorpusEntry]) -> Result<Vec<PromptPair>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let pool = sentence_pool(corpus);
    let n = config.perturb.pairs.min(corpus.len());
    perturb_corpus(&corpus[..n], config.perturb.mode, config.perturb.fraction, &pool, config.seed).stage("perturb")
}

fn matcher_for(config: &ExperimentConfig) -> Result<Matcher> {
    let mut m = Matcher::new(config.lsh.clone(), config.model.d_model, config.model.rope_base)?;
    m.max_distance = config.max_distance;
    Ok(m)
}

/// Register every reference, then run each target once per ablation.
/// Reports are ordered by pair, then by `ablations`.
pub fn run_pairs(config: &ExperimentConfig, pairs: &[PromptPair], ablations: &[Ablation], experiment: &str) -> Result<Vec<RunReport>> {
    let mut pipe = Pipeline::new(config.clone())?;
    for p in pairs {
        pipe.register(&p.reference)?;
    }
    let mut out = Vec::with_capacity(pairs.len() * ablations.len());
    for p in pairs {
        let base = pipe.baseline(&p.target)?;
        for &a in ablations {
            out.push(pipe.run_traced(&p.id, experiment, &base, a)?.report);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub fallbacks: usize,
    pub mean_rouge_l: f64,
    pub mean_perplexity: f64,
    pub mean_similarity: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-ablation means over the reports of one suite. Fallback runs count
/// under the ablation they were asked for.
pub fn summarize(reports: &[RunReport], ablations: &[Ablation]) -> Vec<VariantSummary> {
    ablations
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let rs: Vec<&RunReport> = reports.iter().skip(k).step_by(ablations.len()).collect();
            VariantSummary {
                variant: a.variant().to_owned(),
                runs: rs.len(),
                fallbacks: rs.iter().filter(|r| r.fallback).count(),
                mean_rouge_l: mean(rs.iter().map(|r| r.rouge_l)),
                mean_perplexity: mean(rs.iter().map(|r| r.perplexity)),
                mean_similarity: mean(rs.iter().map(|r| r.similarity)),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSuite {
    pub reports: Vec<RunReport>,
    pub summary: Vec<VariantSummary>,
}

pub fn run_ablation_suite(config: &ExperimentConfig) -> Result<AblationSuite> {
    let corpus = load_or_synthetic(config)?;
    let pairs = corpus_pairs(config, &corpus)?;
    let reports = run_pairs(config, &pairs, &Ablation::ALL, "ablate")?;
    let summary = summarize(&reports, &Ablation::ALL);
    Ok(AblationSuite { reports, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeStudyRow {
    pub pair_id: String,
    pub mode: RopeMode,
    pub layer: usize,
    pub sigma_kv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeModeSummary {
    pub mode: RopeMode,
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeStudy {
    pub rows: Vec<RopeStudyRow>,
    pub summary: Vec<RopeModeSummary>,
}

/// Deviation of the rearranged reference cache from the target's own cache,
/// per storage mode and layer.
pub fn rope_mode_study(config: &ExperimentConfig, pairs: &[PromptPair]) -> Result<RopeStudy> {
    let engine = ModelEngine::new(config.model.clone())?;
    let matcher = matcher_for(config)?;
    let head_rope = config.model.head_rope();
    let n_layers = config.model.n_layers;
    let mut rows = Vec::new();
    for p in pairs {
        let rt = tokenize(&p.reference);
        let tt = tokenize(&p.target);
        let ref_out = engine.full_prefill(&rt).stage("reference prefill")?;
        let tgt_out = engine.full_prefill(&tt).stage("target prefill")?;
        let map = matcher.match_map(&engine.embed(&tt)?, &engine.embed(&rt)?).stage("match")?;
        for mode in RopeMode::ALL {
            let kv = StoredKV::from_forward(&ref_out, mode, &head_rope)?;
            let re = rearrange(&kv, &map, 0, &head_rope).stage("rearrange")?;
            for (l, ((k, v), (gk, gv))) in re.layers.iter().zip(&tgt_out.per_layer_kv).enumerate() {
                let d = kv_deviation((k, v), (gk, gv))?;
                rows.push(RopeStudyRow { pair_id: p.id.clone(), mode, layer: l, sigma_kv: d.mean_sigma_kv() });
            }
        }
    }
    let summary = RopeMode::ALL
        .iter()
        .map(|&mode| {
            let per_layer: Vec<f64> = (0..n_layers)
                .map(|l| mean(rows.iter().filter(|r| r.mode == mode && r.layer == l).map(|r| r.sigma_kv)))
                .collect();
            RopeModeSummary { mode, mean: mean(per_layer.iter().copied()), per_layer }
        })
        .collect();
    Ok(RopeStudy { rows, summary })
}

pub fn run_rope_mode_study(config: &ExperimentConfig) -> Result<RopeStudy> {
    let corpus = load_or_synthetic(config)?;
    rope_mode_study(config, &corpus_pairs(config, &corpus)?)
}

/// Thresholds of the attention-recovery curve.
pub const AR_CURVE: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.55, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanRow {
    /// Correlates `layer` with `layer + 1`.
    pub layer: usize,
    /// Mean over pairs with a defined correlation.
    pub spearman: f64,
    pub degenerate: usize,
    pub hd_overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArPoint {
    pub layer: usize,
    pub threshold: f64,
    /// Mean of `attention_recovery / T` over prompts.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub pattern: PatternKind,
    pub first_layer_live: Vec<usize>,
    pub live_per_layer: Vec<f64>,
    pub mean_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsightReport {
    pub spearman: Vec<SpearmanRow>,
    pub ar_curve: Vec<ArPoint>,
    pub patterns: Vec<PatternRow>,
}

/// One flattened insight value, for CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsightRow {
    pub section: String,
    pub layer: Option<usize>,
    pub key: String,
    pub value: f64,
}

impl InsightReport {
    pub fn rows(&self) -> Vec<InsightRow> {
        let row = |section: &str, layer, key: String, value| InsightRow { section: section.into(), layer, key, value };
        let mut out = Vec::new();
        for s in &self.spearman {
            out.push(row("spearman", Some(s.layer), "spearman".into(), s.spearman));
            out.push(row("spearman", Some(s.layer), "degenerate".into(), s.degenerate as f64));
            out.push(row("spearman", Some(s.layer), "hd_overlap".into(), s.hd_overlap));
        }
        for a in &self.ar_curve {
            out.push(row("ar_curve", Some(a.layer), format!("thres_{}", a.threshold), a.fraction));
        }
        for p in &self.patterns {
            let name = serde_json::to_value(p.pattern).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            out.push(row("pattern", None, format!("{name}_perplexity"), p.mean_perplexity));
            for (l, v) in p.live_per_layer.iter().enumerate() {
                out.push(row("pattern", Some(l), format!("{name}_live"), *v));
            }
        }
        out
    }
}

pub const PATTERNS: [PatternKind; 3] = [PatternKind::Constant, PatternKind::ExpGrowth, PatternKind::ExpDecay];

/// Adjacent-layer deviation ranks, attention-recovery curves and retention
/// pattern perplexities over `pairs`.
pub fn insight_suite(config: &ExperimentConfig, pairs: &[PromptPair]) -> Result<InsightReport> {
    let engine = ModelEngine::new(config.model.clone())?;
    let matcher = matcher_for(config)?;
    let head_rope = config.model.head_rope();
    let n_layers = config.model.n_layers;

    let mut rho: Vec<Vec<f64>> = vec![Vec::new(); n_layers.saturating_sub(1)];
    let mut degenerate = vec![0usize; n_layers.saturating_sub(1)];
    let mut overlap: Vec<Vec<f64>> = vec![Vec::new(); n_layers.saturating_sub(1)];
    let mut ar: Vec<Vec<f64>> = vec![Vec::new(); n_layers * AR_CURVE.len()];
    let mut live: Vec<Vec<Vec<usize>>> = vec![Vec::new(); PATTERNS.len()];
    let mut ppl: Vec<Vec<f64>> = vec![Vec::new(); PATTERNS.len()];

    for p in pairs {
        let rt = tokenize(&p.reference);
        let tt = tokenize(&p.target);
        let t = tt.len();
        let ref_out = engine.full_prefill(&rt).stage("reference prefill")?;
        let tgt_out = engine.full_prefill(&tt).stage("target prefill")?;
        let map = matcher.match_map(&engine.embed(&tt)?, &engine.embed(&rt)?).stage("match")?;
        let kv = StoredKV::from_forward(&ref_out, config.rope_storage_mode, &head_rope)?;
        let injected = rearrange(&kv, &map, 0, &head_rope)?;

        // Every token recomputed at every layer, so each layer reports the
        // deviation of every token.
        let probe = engine.prefill(&tt, Some(&injected), &LayerSchedule::full(n_layers, t)).stage("insight prefill")?;
        for l in 0..n_layers.saturating_sub(1) {
            let (a, b) = (&probe.deviations[l], &probe.deviations[l + 1]);
            match spearman_adjacent(&a.sigma_kv, &b.sigma_kv)? {
                Correlation::Value(v) => rho[l].push(v),
                Correlation::Degenerate => degenerate[l] += 1,
            }
            overlap[l].push(hd_overlap(&a.hd_set, &b.hd_set));
        }

        for (l, attn) in tgt_out.per_layer_attn_avg.iter().enumerate() {
            for (k, &thres) in AR_CURVE.iter().enumerate() {
                let n = attention_recovery(attn, thres)?;
                ar[l * AR_CURVE.len() + k].push(n as f64 / t as f64);
            }
        }

        // Hold out the last quarter of the target as the text to score.
        let cut = (t * 3 / 4).max(1);
        let (prefix, cont) = tt.split_at(cut);
        if cont.is_empty() {
            continue;
        }
        for (k, &kind) in PATTERNS.iter().enumerate() {
            let params = ScheduleParams {
                retention: Some(RetentionShape { kind, rate: config.retention.rate }),
                ..config.schedule_params()
            };
            let schedule = plan_schedule(prefix.len(), n_layers, None, &params)?;
            let out = engine.prefill(prefix, None, &schedule).stage("pattern prefill")?;
            let logits = engine.continuation_logits(&out, cont)?;
            let mut scored = vec![*prefix.last().expect("nonempty")];
            scored.extend_from_slice(cont);
            ppl[k].push(perplexity(&logits, &scored)?);
            live[k].push(out.live.iter().map(Vec::len).collect());
        }
    }

    let spearman = (0..n_layers.saturating_sub(1))
        .map(|l| SpearmanRow { layer: l, spearman: mean(rho[l].iter().copied()), degenerate: degenerate[l], hd_overlap: mean(overlap[l].iter().copied()) })
        .collect();
    let ar_curve = (0..n_layers)
        .flat_map(|l| AR_CURVE.iter().enumerate().map(move |(k, &threshold)| (l, k, threshold)))
        .map(|(l, k, threshold)| ArPoint { layer: l, threshold, fraction: mean(ar[l * AR_CURVE.len() + k].iter().copied()) })
        .collect();
    let patterns = PATTERNS
        .iter()
        .enumerate()
        .map(|(k, &pattern)| PatternRow {
            pattern,
            first_layer_live: live[k].iter().map(|v| v[0]).collect(),
            live_per_layer: (0..n_layers).map(|l| mean(live[k].iter().map(|v| v[l] as f64))).collect(),
            mean_perplexity: mean(ppl[k].iter().copied()),
        })
        .collect();
    Ok(InsightReport { spearman, ar_curve, patterns })
}

pub fn run_insight_suite(config: &ExperimentConfig) -> Result<InsightReport> {
    let corpus = load_or_synthetic(config)?;
    insight_suite(config, &corpus_pairs(config, &corpus)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub pairs: usize,
    pub mean_similarity: f64,
    pub mean_raw_distance: f64,
}

/// Mean similarity between each entry and its replacement-perturbed copy at
/// every fraction.
pub fn similarity_sweep(config: &ExperimentConfig, corpus: &[CorpusEntry], fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    let engine = ModelEngine::new(config.model.clone())?;
    let matcher = matcher_for(config)?;
    let pool = sentence_pool(corpus);
    let entries = &corpus[..config.perturb.pairs.min(corpus.len())];
    let targets: Vec<_> = entries.iter().map(|e| engine.embed(&tokenize(&e.prompt()))).collect::<Result<_>>()?;
    fractions
        .iter()
        .map(|&f| {
            let pairs = perturb_corpus(entries, PerturbMode::Replace, f, &pool, config.seed)?;
            let mut sims = Vec::new();
            let mut dists = Vec::new();
            for (p, te) in pairs.iter().zip(&targets) {
                let map = matcher.match_map(te, &engine.embed(&tokenize(&p.reference))?)?;
                let s = matcher.score(&map);
                sims.push(s.value);
                dists.push(s.raw_distance);
            }
            Ok(SweepPoint { fraction: f, pairs: pairs.len(), mean_similarity: mean(sims), mean_raw_distance: mean(dists) })
        })
        .collect()
}

/// Fractions 0.1 to 0.9.
pub fn default_fractions() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tokens: usize,
    pub report: RunReport,
    pub attention_ratio: f64,
    pub flops_ratio: f64,
    pub cache_ratio: f64,
    pub retain_per_layer: Vec<usize>,
}

/// Byte-exact `t`-token prompt built by concatenating corpus texts.
pub fn long_text(corpus: &[CorpusEntry], t: usize) -> Result<String> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut s = String::new();
    for e in corpus.iter().cycle() {
        if s.len() >= t {
            break;
        }
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(&e.text);
    }
    let mut end = t;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s.truncate(end);
    Ok(s)
}

/// One shared-cache run on a `t`-token target whose perturbed copy is stored.
pub fn run_bench(config: &ExperimentConfig, t: usize) -> Result<BenchReport> {
    let corpus = load_or_synthetic(config)?;
    let pool = sentence_pool(&corpus);
    let target = long_text(&corpus, t)?;
    let perturbed = perturb_text(&target, config.perturb.mode, config.perturb.fraction, &pool, config.seed, 0).stage("perturb")?;
    let reference = long_text(&[CorpusEntry { id: String::new(), text: perturbed, query: None }], t)?;
    let mut pipe = Pipeline::new(config.clone())?;
    pipe.register(&reference)?;
    let base = pipe.baseline(&target)?;
    let trace = pipe.run_traced("bench", "bench", &base, Ablation::None)?;
    let r = trace.report;
    Ok(BenchReport {
        tokens: r.tokens,
        attention_ratio: r.attention_flops_shared as f64 / r.attention_flops_full as f64,
        flops_ratio: r.flops_shared as f64 / r.flops_full as f64,
        cache_ratio: r.cache_bytes_shared as f64 / r.cache_bytes_full as f64,
        retain_per_layer: trace.schedule.retain,
        report: r,
    })
}

/// Rows as CSV (header from the field names) or as a pretty JSON array.
pub fn write_rows<T: Serialize>(rows: &[T], path: &Path, format: Format) -> Result<()> {
    write_text(path, &render_rows(rows, format)?)
}

pub fn render_rows<T: Serialize>(rows: &[T], format: Format) -> Result<String> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows)?;
            s.push('\n');
            Ok(s)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Shape(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Shape(e.to_string()))
        }
    }
}
