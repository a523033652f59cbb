#![no_main]

use libfuzzer_sys::fuzz_target;
use temporal_core::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<TrainConfig>(data) {
        if config.validate().is_ok() {
            let again: TrainConfig = serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
            assert!(again.validate().is_ok());
        }
    }
});
