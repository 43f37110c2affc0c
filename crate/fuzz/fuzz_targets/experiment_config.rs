#![no_main]
use libfuzzer_sys::fuzz_target;

use goalnav::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ExperimentConfig::check_syntax(text);
    }
});
