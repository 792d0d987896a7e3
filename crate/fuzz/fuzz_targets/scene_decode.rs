#![no_main]

use fad_core::task_harness::data::{decode_scene, encode_scene};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(scene) = decode_scene(data) {
        let bytes = encode_scene(&scene);
        let again = decode_scene(&bytes).expect("re-decode");
        assert_eq!(bytes, encode_scene(&again));
    }
});
