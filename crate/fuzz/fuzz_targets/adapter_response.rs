#![no_main]

use libfuzzer_sys::fuzz_target;
use temporal_core::vos::{AdapterPrompt, AdapterRequest, AdapterResponse};

fuzz_target!(|data: &[u8]| {
    let request = AdapterRequest {
        frames: vec!["a.pgm".into(), "b.pgm".into(), "c.pgm".into()],
        prompts: vec![AdapterPrompt {
            index: 0,
            mask_path: "a_mask.pgm".into(),
        }],
    };
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(resp) = AdapterResponse::parse_line(line, &request) {
            assert!(resp.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
});
