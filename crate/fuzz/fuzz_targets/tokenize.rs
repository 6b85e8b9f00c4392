#![no_main]

use libfuzzer_sys::fuzz_target;
use semshare_core::model::{detokenize, tokenize};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let ids = tokenize(text);
    assert_eq!(ids.len(), text.len());
    assert_eq!(detokenize(&ids), text);
});
