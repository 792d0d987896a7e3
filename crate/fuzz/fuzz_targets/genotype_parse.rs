#![no_main]

use fad_core::search_engine::Genotype;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = Genotype::parse(text) {
        // Accepted documents survive a round trip unchanged.
        let again = Genotype::parse(&g.to_json()).expect("re-parse");
        assert_eq!(g, again);
    }
});
