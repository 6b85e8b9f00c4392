#![no_main]

use libfuzzer_sys::fuzz_target;
use semshare_core::store::CacheStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = CacheStore::from_bytes(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(store.to_bytes(), data);
    }
});
