#![no_main]

use fad_core::task_harness::DatasetIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = DatasetIndex::parse(text);
    }
});
