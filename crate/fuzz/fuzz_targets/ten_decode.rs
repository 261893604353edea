#![no_main]

use libfuzzer_sys::fuzz_target;
use spatem_tensor::tenfile;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(t) = tenfile::decode(data) {
        assert_eq!(tenfile::encode(&t), data);
    }
});
