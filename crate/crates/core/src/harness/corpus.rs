use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One JSONL line: `{"id": ..., "text": ..., "query": ...}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl CorpusEntry {
    /// Prompt fed to the model: the text, then the query on its own line.
    pub fn prompt(&self) -> String {
        match &self.query {
            Some(q) => format!("{}\n{}", self.text, q),
            None => self.text.clone(),
        }
    }
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusEntry>> {
    let mut out: Vec<CorpusEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: CorpusEntry =
            serde_json::from_str(line).map_err(|e| Error::Corpus { line: i + 1, message: e.to_string() })?;
        if entry.text.trim().is_empty() {
            return Err(Error::Corpus { line: i + 1, message: "empty text".into() });
        }
        if out.iter().any(|e| e.id == entry.id) {
            return Err(Error::Corpus { line: i + 1, message: format!("duplicate id {:?}", entry.id) });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

const SUBJECTS: &[&str] = &[
    "the engineer", "a small team", "the committee", "our neighbour", "the old library", "a local farmer",
    "the new manager", "every student", "the river guide", "a quiet child", "the city council", "the chef",
    "my cousin", "the night nurse", "a travelling musician", "the museum curator",
];
const VERBS: &[&str] = &[
    "repaired", "described", "ignored", "painted", "measured", "sold", "borrowed", "planned", "cleaned",
    "discovered", "questioned", "photographed", "delivered", "rebuilt", "forgot", "celebrated",
];
const ADJECTIVES: &[&str] = &[
    "broken", "bright", "ancient", "heavy", "narrow", "famous", "quiet", "expensive", "wooden", "crowded",
    "distant", "simple", "strange", "careful", "golden", "muddy",
];
const OBJECTS: &[&str] = &[
    "bridge", "garden", "report", "window", "market stall", "letter", "boat", "harvest", "budget", "tower",
    "recipe", "map", "engine", "concert", "schedule", "painting",
];
const TAILS: &[&str] = &[
    "before the storm arrived", "after a long winter", "near the station", "during the festival",
    "without telling anyone", "for the third time", "on a rainy morning", "with great care",
    "in front of the crowd", "late in the evening", "despite the noise", "at the end of the month",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut s = format!("{} {} the {} {}", pick(rng, SUBJECTS), pick(rng, VERBS), pick(rng, ADJECTIVES), pick(rng, OBJECTS));
    if rng.random_bool(0.6) {
        s.push(' ');
        s.push_str(pick(rng, TAILS));
    }
    let end = match rng.random_range(0..10) {
        0 => '?',
        1 => '!',
        _ => '.',
    };
    s.push(end);
    capitalise(&s)
}

/// Deterministic English-like corpus of `n` multi-sentence entries.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<CorpusEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_sent = rng.random_range(8..=12);
            let text = (0..n_sent).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" ");
            CorpusEntry { id: format!("toy-{i:03}"), text, query: None }
        })
        .collect()
}
