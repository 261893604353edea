#![no_main]

use libfuzzer_sys::fuzz_target;
use spatem::ModelConfig;
use spatem_cli::config::{Mode, RunConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = RunConfig::parse(data) {
        let _ = c.train.validate();
        let _ = c.generator.validate();
        for mode in Mode::ALL {
            let _ = c.model_config(mode, None).validate();
        }
    }
    let _ = serde_json::from_slice::<ModelConfig>(data).map(|m| m.validate());
});
