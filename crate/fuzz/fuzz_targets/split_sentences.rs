#![no_main]

use libfuzzer_sys::fuzz_target;
use semshare_core::harness::split_sentences;

fuzz_target!(|text: &str| {
    let parts = split_sentences(text);
    assert!(parts.iter().all(|p| !p.is_empty() && p.trim() == p));
    let words: Vec<&str> = text.split_whitespace().collect();
    let joined = parts.join(" ");
    assert_eq!(joined.split_whitespace().collect::<Vec<_>>(), words);
});
