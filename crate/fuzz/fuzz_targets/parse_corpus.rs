#![no_main]

use libfuzzer_sys::fuzz_target;
use semshare_core::harness::corpus::{parse_corpus, to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_corpus(text) {
        let again = parse_corpus(&to_jsonl(&entries).unwrap()).unwrap();
        assert_eq!(again, entries);
    }
});
