#![no_main]
use libfuzzer_sys::fuzz_target;

use goalnav::dataset::Dataset;

fuzz_target!(|data: &[u8]| {
    // lengths in the header must never trigger an oversized allocation
    if let Ok(ds) = Dataset::decode(data) {
        let bytes = ds.to_bytes();
        let again = Dataset::decode(&bytes).expect("encoded container decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
