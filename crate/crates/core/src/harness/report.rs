use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema for [`ReportFile`].
pub const RUN_REPORT_SCHEMA: &str = include_str!("../../schemas/run_report.schema.json");

/// CSV column order. Per-layer lists are `;`-joined.
pub const CSV_COLUMNS: [&str; 21] = [
    "schema_version",
    "experiment",
    "variant",
    "prompt_id",
    "reference_id",
    "similarity",
    "raw_distance",
    "fallback",
    "tokens",
    "attention_flops_shared",
    "attention_flops_full",
    "flops_shared",
    "flops_full",
    "cache_bytes_shared",
    "cache_bytes_full",
    "sigma_kv_per_layer",
    "recompute_per_layer",
    "live_per_layer",
    "perplexity",
    "rouge_l",
    "generated_text",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub experiment: String,
    /// `semshare`, `ablation-zero`, `ablation-random` or `full`.
    pub variant: String,
    pub prompt_id: String,
    pub reference_id: Option<u64>,
    pub similarity: f64,
    pub raw_distance: f64,
    /// No reference passed the similarity gate; everything was recomputed.
    pub fallback: bool,
    pub tokens: usize,
    pub attention_flops_shared: u64,
    pub attention_flops_full: u64,
    pub flops_shared: u64,
    pub flops_full: u64,
    pub cache_bytes_shared: u64,
    pub cache_bytes_full: u64,
    /// Mean fresh-versus-injected deviation over the tokens computed at
    /// each layer.
    pub sigma_kv_per_layer: Vec<f64>,
    pub recompute_per_layer: Vec<usize>,
    pub live_per_layer: Vec<usize>,
    /// Perplexity of the full-cache continuation under the shared cache.
    pub perplexity: f64,
    /// ROUGE-L of the generated ids against the full-cache generation.
    pub rouge_l: f64,
    pub generated_text: String,
}

impl RunReport {
    pub fn check_finite(&self) -> Result<()> {
        let scalars = [self.similarity, self.raw_distance, self.perplexity, self.rouge_l];
        if scalars.iter().chain(&self.sigma_kv_per_layer).all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Shape(format!("report for {} has a non-finite value", self.prompt_id)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema_version: u32,
    pub reports: Vec<RunReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// From a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str, column: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| Error::Shape(format!("bad {column} entry {x:?}"))))
        .collect()
}

fn csv_row(r: &RunReport) -> Vec<String> {
    vec![
        r.schema_version.to_string(),
        r.experiment.clone(),
        r.variant.clone(),
        r.prompt_id.clone(),
        r.reference_id.map(|i| i.to_string()).unwrap_or_default(),
        r.similarity.to_string(),
        r.raw_distance.to_string(),
        r.fallback.to_string(),
        r.tokens.to_string(),
        r.attention_flops_shared.to_string(),
        r.attention_flops_full.to_string(),
        r.flops_shared.to_string(),
        r.flops_full.to_string(),
        r.cache_bytes_shared.to_string(),
        r.cache_bytes_full.to_string(),
        join(&r.sigma_kv_per_layer),
        join(&r.recompute_per_layer),
        join(&r.live_per_layer),
        r.perplexity.to_string(),
        r.rouge_l.to_string(),
        r.generated_text.clone(),
    ]
}

pub fn to_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(csv_row(r))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Shape(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Shape(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<RunReport>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    if rd.headers()?.iter().ne(CSV_COLUMNS) {
        return Err(Error::Shape("unexpected CSV header".into()));
    }
    let num = |s: &str, c: &str| -> Result<f64> { s.parse().map_err(|_| Error::Shape(format!("bad {c} {s:?}"))) };
    let int = |s: &str, c: &str| -> Result<u64> { s.parse().map_err(|_| Error::Shape(format!("bad {c} {s:?}"))) };
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or_default();
            Ok(RunReport {
                schema_version: int(f(0), "schema_version")? as u32,
                experiment: f(1).to_owned(),
                variant: f(2).to_owned(),
                prompt_id: f(3).to_owned(),
                reference_id: if f(4).is_empty() { None } else { Some(int(f(4), "reference_id")?) },
                similarity: num(f(5), "similarity")?,
                raw_distance: num(f(6), "raw_distance")?,
                fallback: f(7).parse().map_err(|_| Error::Shape(format!("bad fallback {:?}", f(7))))?,
                tokens: int(f(8), "tokens")? as usize,
                attention_flops_shared: int(f(9), "attention_flops_shared")?,
                attention_flops_full: int(f(10), "attention_flops_full")?,
                flops_shared: int(f(11), "flops_shared")?,
                flops_full: int(f(12), "flops_full")?,
                cache_bytes_shared: int(f(13), "cache_bytes_shared")?,
                cache_bytes_full: int(f(14), "cache_bytes_full")?,
                sigma_kv_per_layer: split(f(15), "sigma_kv_per_layer")?,
                recompute_per_layer: split(f(16), "recompute_per_layer")?,
                live_per_layer: split(f(17), "live_per_layer")?,
                perplexity: num(f(18), "perplexity")?,
                rouge_l: num(f(19), "rouge_l")?,
                generated_text: f(20).to_owned(),
            })
        })
        .collect()
}

pub fn to_json(reports: &[RunReport]) -> Result<String> {
    let file = ReportFile { schema_version: SCHEMA_VERSION, reports: reports.to_vec() };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<Vec<RunReport>> {
    let file: ReportFile = serde_json::from_str(text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Version { found: file.schema_version, expected: SCHEMA_VERSION });
    }
    Ok(file.reports)
}

/// Write reports as CSV or JSON, creating parent directories.
pub fn emit_results(reports: &[RunReport], path: &Path, format: Format) -> Result<()> {
    for r in reports {
        r.check_finite()?;
    }
    let text = match format {
        Format::Csv => to_csv(reports)?,
        Format::Json => to_json(reports)?,
    };
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> RunReport {
        RunReport {
            schema_version: SCHEMA_VERSION,
            experiment: "run".into(),
            variant: "semshare".into(),
            prompt_id: "p, with \"quotes\"".into(),
            reference_id: Some(3),
            similarity: 0.987654321,
            raw_distance: 0.37,
            fallback: false,
            tokens: 120,
            attention_flops_shared: 10,
            attention_flops_full: 40,
            flops_shared: 100,
            flops_full: 400,
            cache_bytes_shared: 1000,
            cache_bytes_full: 2000,
            sigma_kv_per_layer: vec![0.0, 0.125, 1e-7],
            recompute_per_layer: vec![120, 30, 15],
            live_per_layer: vec![96, 80, 60],
            perplexity: 251.5,
            rouge_l: 0.5,
            generated_text: "line\nbreak".into(),
        }
    }

    #[test]
    fn empty_csv_has_header() {
        let s = to_csv(&[]).unwrap();
        assert_eq!(s.trim_end(), CSV_COLUMNS.join(","));
        assert!(from_csv(&s).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let mut b = sample();
        b.reference_id = None;
        b.fallback = true;
        b.sigma_kv_per_layer.clear();
        let rs = vec![sample(), b];
        assert_eq!(from_csv(&to_csv(&rs).unwrap()).unwrap(), rs);
    }

    #[test]
    fn json_round_trip() {
        let rs = vec![sample()];
        assert_eq!(from_json(&to_json(&rs).unwrap()).unwrap(), rs);
        let bumped = to_json(&rs).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(from_json(&bumped), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = sample();
        r.perplexity = f64::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_results(&[r], &dir.path().join("x.csv"), Format::Csv).is_err());
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(Format::from_path(Path::new("a/b.json")), Format::Json);
        assert_eq!(Format::from_path(Path::new("a/b.csv")), Format::Csv);
    }
}
