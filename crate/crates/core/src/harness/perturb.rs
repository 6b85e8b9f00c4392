use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PerturbMode;
use super::corpus::CorpusEntry;
use crate::error::{Error, Result};
use crate::metrics::round_half_up;

/// A stored (perturbed) reference and the original target prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: String,
    pub reference: String,
    pub target: String,
}

/// Split after `.`, `?` or `!` runs that are followed by whitespace or the
/// end of the text. Sentences are trimmed; empty pieces are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        if let Some(&(_, n)) = chars.peek() {
            if matches!(n, '.' | '?' | '!') || !n.is_whitespace() {
                continue;
            }
        }
        let end = i + c.len_utf8();
        let s = text[start..end].trim();
        if !s.is_empty() {
            out.push(s.to_owned());
        }
        start = end;
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_owned());
    }
    out
}

/// Every sentence of the corpus, in order.
pub fn sentence_pool(corpus: &[CorpusEntry]) -> Vec<String> {
    corpus.iter().flat_map(|e| split_sentences(&e.text)).collect()
}

/// Replacement for `original`: a seeded pick among pool sentences within
/// 10% of its byte length, else among the closest lengths.
fn pick_replacement<'a>(original: &str, pool: &'a [String], rng: &mut ChaCha8Rng) -> Option<&'a str> {
    let len = original.len() as f64;
    let usable: Vec<&String> = pool.iter().filter(|p| p.as_str() != original).collect();
    if usable.is_empty() {
        return None;
    }
    let mut near: Vec<&String> = usable.iter().copied().filter(|p| (p.len() as f64 - len).abs() <= 0.1 * len).collect();
    if near.is_empty() {
        let best = usable.iter().map(|p| p.len().abs_diff(original.len())).min().expect("nonempty");
        near = usable.into_iter().filter(|p| p.len().abs_diff(original.len()) == best).collect();
    }
    Some(near[rng.random_range(0..near.len())].as_str())
}

/// Perturb one text. `salt` separates entries under one seed; for a fixed
/// `(seed, salt)` a larger fraction touches a superset of sentences and each
/// sentence always gets the same replacement.
pub fn perturb_text(text: &str, mode: PerturbMode, fraction: f64, pool: &[String], seed: u64, salt: u64) -> Result<String> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Perturb(format!("fraction {fraction} outside [0, 1]")));
    }
    if fraction == 0.0 {
        return Ok(text.to_owned());
    }
    let sentences = split_sentences(text);
    let n = sentences.len();
    if n == 0 {
        return Err(Error::Perturb("text has no sentences".into()));
    }
    let k = round_half_up(fraction * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt << 1);
    order.shuffle(&mut rng);
    let mut chosen = vec![false; n];
    order[..k].iter().for_each(|&i| chosen[i] = true);

    let kept: Vec<String> = match mode {
        PerturbMode::Eliminate => {
            if k == n {
                return Err(Error::Perturb(format!("eliminating {k} of {n} sentences leaves nothing")));
            }
            sentences.into_iter().zip(&chosen).filter(|(_, &c)| !c).map(|(s, _)| s).collect()
        }
        PerturbMode::Replace => {
            if pool.is_empty() {
                return Err(Error::Perturb("replacement needs a nonempty pool".into()));
            }
            let mut picks = ChaCha8Rng::seed_from_u64(seed);
            picks.set_stream((salt << 1) | 1);
            let mut out = Vec::with_capacity(n);
            for (s, &c) in sentences.iter().zip(&chosen) {
                // Draw for every sentence so picks do not depend on `fraction`.
                let r = pick_replacement(s, pool, &mut picks);
                out.push(match (c, r) {
                    (true, Some(r)) => r.to_owned(),
                    (true, None) => return Err(Error::Perturb("pool only holds the sentence being replaced".into())),
                    (false, _) => s.clone(),
                });
            }
            out
        }
    };
    Ok(kept.join(" "))
}

/// `(perturbed reference, original target)` for every entry.
pub fn perturb_corpus(corpus: &[CorpusEntry], mode: PerturbMode, fraction: f64, pool: &[String], seed: u64) -> Result<Vec<PromptPair>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let text = perturb_text(&e.text, mode, fraction, pool, seed, i as u64)?;
            let reference = CorpusEntry { text, ..e.clone() }.prompt();
            Ok(PromptPair { id: e.id.clone(), reference, target: e.prompt() })
        })
        .collect()
}
