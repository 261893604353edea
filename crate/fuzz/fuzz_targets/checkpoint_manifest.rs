#![no_main]

use libfuzzer_sys::fuzz_target;
use spatem::checkpoint::{self, CheckpointManifest};

fuzz_target!(|data: &[u8]| {
    // Split the input into a manifest and a blob at the first NUL.
    let (manifest, blob) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(m) = CheckpointManifest::parse(manifest) {
        let _ = checkpoint::decode(&m, blob);
    }
});
