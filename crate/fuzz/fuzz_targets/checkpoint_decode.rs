#![no_main]

use fad_core::tensor::checkpoint;
use libfuzzer_sys::fuzz_target;

// Input layout: u32 LE manifest length, manifest bytes, blob bytes.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    let (manifest, blob) = rest.split_at(n.min(rest.len()));
    if let Ok(store) = checkpoint::decode(manifest, blob) {
        let (m, b) = checkpoint::encode(&store);
        checkpoint::decode(m.as_bytes(), &b).expect("re-decode");
    }
});
