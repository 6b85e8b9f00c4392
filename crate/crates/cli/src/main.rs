use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use semshare_core::harness::experiments::{
    corpus_pairs, default_fractions, load_or_synthetic, render_rows, run_ablation_suite, run_bench, run_insight_suite,
    run_rope_mode_study, similarity_sweep,
};
use semshare_core::harness::report::{emit_results, to_csv, to_json, write_text, Format};
use semshare_core::harness::RunReport;
use semshare_core::harness::{corpus, Ablation, CorpusEntry, ExperimentConfig, PerturbMode, Pipeline};
use semshare_core::retention::PatternKind;
use semshare_core::store::{CacheStore, RopeMode};

#[derive(Parser)]
#[command(name = "semshare", version, about = "Semantic KV cache sharing on a toy transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every verb. The config file overrides defaults and
/// flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cache store file.
    #[arg(long, global = true, env = "SEMSHARE_STORE", default_value = "semshare.sskv")]
    store: PathBuf,
    /// Result file; `.json` selects JSON, anything else CSV.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    similarity_threshold: Option<f64>,
    #[arg(long, global = true)]
    hot_cold_thres: Option<f64>,
    #[arg(long, global = true)]
    omega_cold: Option<f64>,
    #[arg(long, global = true)]
    omega_hot: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    alpha_recomp: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    rope_storage_mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    ablation: Option<AblationArg>,
    /// JSONL corpus.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    n_new_tokens: Option<usize>,
    #[arg(long, global = true, value_enum)]
    retention: Option<PatternArg>,
    #[arg(long, global = true)]
    no_retention: bool,
    #[arg(long, global = true)]
    n_layers: Option<usize>,
    #[arg(long, global = true)]
    pairs: Option<usize>,
    #[arg(long, global = true)]
    fraction: Option<f64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<PerturbArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PostRope,
    PreRope,
    PreRopeReapply,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    Zero,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Constant,
    ExpGrowth,
    ExpDecay,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    Eliminate,
    Replace,
}

#[derive(Subcommand)]
enum Command {
    /// Prefill prompts and add their caches to the store.
    Register {
        /// Prompt text; omit to register every corpus entry.
        #[arg(long)]
        text: Option<String>,
    },
    /// Run prompts against the store and report.
    Run {
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "prompt")]
        id: String,
    },
    /// Write perturbed (reference, target) pairs as JSONL, or a similarity
    /// sweep over perturbation fractions.
    Perturb {
        #[arg(long)]
        sweep: bool,
    },
    /// SemShare against zeroed and random injected caches.
    Ablate,
    /// Deviation of the rearranged cache per RoPE storage mode.
    RopeStudy,
    /// Layer deviation correlation, attention recovery and retention patterns.
    Insights,
    /// FLOP and cache-size ratios on one long prompt.
    Bench {
        #[arg(long, default_value_t = 2048)]
        tokens: usize,
    },
}

impl Common {
    fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.similarity_threshold {
            c.similarity_threshold = v;
        }
        if let Some(v) = self.hot_cold_thres {
            c.hot_cold_thres = v;
        }
        if let Some(v) = self.omega_cold {
            c.omega_cold = v;
        }
        if let Some(v) = self.omega_hot {
            c.omega_hot = v;
        }
        if let Some(v) = &self.alpha_recomp {
            c.alpha_recomp = v.clone();
        }
        if let Some(v) = self.rope_storage_mode {
            c.rope_storage_mode = match v {
                ModeArg::PostRope => RopeMode::PostRope,
                ModeArg::PreRope => RopeMode::PreRope,
                ModeArg::PreRopeReapply => RopeMode::PreRopeReapply,
            };
        }
        if let Some(v) = self.ablation {
            c.ablation = match v {
                AblationArg::None => Ablation::None,
                AblationArg::Zero => Ablation::Zero,
                AblationArg::Random => Ablation::Random,
            };
        }
        if let Some(v) = &self.corpus {
            c.corpus = Some(v.clone());
        }
        if let Some(v) = &self.output {
            c.output = Some(v.clone());
        }
        if let Some(v) = self.n_new_tokens {
            c.n_new_tokens = v;
        }
        if let Some(v) = self.retention {
            c.retention.kind = match v {
                PatternArg::Constant => PatternKind::Constant,
                PatternArg::ExpGrowth => PatternKind::ExpGrowth,
                PatternArg::ExpDecay => PatternKind::ExpDecay,
            };
        }
        if self.no_retention {
            c.retention.enabled = false;
        }
        if let Some(v) = self.n_layers {
            c.model.n_layers = v;
            if self.alpha_recomp.is_none() {
                c.alpha_recomp.clear();
            }
        }
        if let Some(v) = self.pairs {
            c.perturb.pairs = v;
        }
        if let Some(v) = self.fraction {
            c.perturb.fraction = v;
        }
        if let Some(v) = self.mode {
            c.perturb.mode = match v {
                PerturbArg::Eliminate => PerturbMode::Eliminate,
                PerturbArg::Replace => PerturbMode::Replace,
            };
        }
        c.validate().context("invalid configuration")?;
        Ok(c)
    }

    fn format_for(&self, path: &Path) -> Format {
        match self.format {
            Some(FormatArg::Csv) => Format::Csv,
            Some(FormatArg::Json) => Format::Json,
            None => Format::from_path(path),
        }
    }

    fn load_store(&self) -> Result<CacheStore> {
        if self.store.exists() {
            CacheStore::load(&self.store).with_context(|| format!("loading store {}", self.store.display()))
        } else {
            Ok(CacheStore::new())
        }
    }
}

/// Write `text` to the output path, or print it.
fn deliver(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    match &cfg.output {
        Some(p) => write_text(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prompts(cfg: &ExperimentConfig, text: Option<String>, id: &str) -> Result<Vec<CorpusEntry>> {
    match (text, &cfg.corpus) {
        (Some(t), _) => Ok(vec![CorpusEntry { id: id.to_owned(), text: t, query: None }]),
        (None, Some(p)) => corpus::load_corpus(p).with_context(|| format!("reading corpus {}", p.display())),
        (None, None) => bail!("give --text or --corpus"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = common.experiment_config()?;
    let format = common.format_for(cfg.output.as_deref().unwrap_or(Path::new("-.csv")));
    match cli.command {
        Command::Register { text } => {
            let mut pipe = Pipeline::with_store(cfg.clone(), common.load_store()?)?;
            for e in prompts(&cfg, text, "prompt")? {
                let id = pipe.register(&e.prompt()).with_context(|| format!("registering {}", e.id))?;
                println!("{}\t{}", e.id, id);
            }
            pipe.store().persist(&common.store).with_context(|| format!("saving store {}", common.store.display()))?;
        }
        Command::Run { text, id } => {
            let pipe = Pipeline::with_store(cfg.clone(), common.load_store()?)?;
            let mut reports = Vec::new();
            for e in prompts(&cfg, text, &id)? {
                reports.push(pipe.run(&e.id, &e.prompt()).with_context(|| format!("running {}", e.id))?);
            }
            match &cfg.output {
                Some(p) => emit_results(&reports, p, format)?,
                None => deliver(&cfg, &render_reports(&reports, format)?)?,
            }
        }
        Command::Perturb { sweep } => {
            let corpus = load_or_synthetic(&cfg)?;
            if sweep {
                let points = similarity_sweep(&cfg, &corpus, &default_fractions())?;
                deliver(&cfg, &render_rows(&points, format)?)?;
            } else {
                let pairs = corpus_pairs(&cfg, &corpus)?;
                deliver(&cfg, &corpus::to_jsonl(&pairs)?)?;
            }
        }
        Command::Ablate => {
            let suite = run_ablation_suite(&cfg)?;
            match &cfg.output {
                Some(p) => emit_results(&suite.reports, p, format)?,
                None => deliver(&cfg, &render_reports(&suite.reports, format)?)?,
            }
            for s in &suite.summary {
                eprintln!(
                    "{:<16} runs {:>3}  fallbacks {:>3}  rouge_l {:.4}  perplexity {:.3}",
                    s.variant, s.runs, s.fallbacks, s.mean_rouge_l, s.mean_perplexity
                );
            }
        }
        Command::RopeStudy => {
            let study = run_rope_mode_study(&cfg)?;
            deliver(&cfg, &render_rows(&study.rows, format)?)?;
            for s in &study.summary {
                eprintln!("{:<18} mean sigma_kv {:.6}", s.mode.as_str(), s.mean);
            }
        }
        Command::Insights => {
            let rep = run_insight_suite(&cfg)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&rep)? + "\n",
                Format::Csv => render_rows(&rep.rows(), Format::Csv)?,
            };
            deliver(&cfg, &text)?;
        }
        Command::Bench { tokens } => {
            let b = run_bench(&cfg, tokens)?;
            match &cfg.output {
                Some(p) => emit_results(std::slice::from_ref(&b.report), p, format)?,
                None => deliver(&cfg, &render_reports(std::slice::from_ref(&b.report), format)?)?,
            }
            eprintln!(
                "tokens {}  attention flops {:.4}  total flops {:.4}  cache bytes {:.4}  fallback {}",
                b.tokens, b.attention_ratio, b.flops_ratio, b.cache_ratio, b.report.fallback
            );
        }
    }
    Ok(())
}

fn render_reports(reports: &[RunReport], format: Format) -> Result<String> {
    Ok(match format {
        Format::Csv => to_csv(reports)?,
        Format::Json => to_json(reports)?,
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
