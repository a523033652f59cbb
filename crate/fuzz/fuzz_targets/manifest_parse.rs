#![no_main]

use libfuzzer_sys::fuzz_target;
use temporal_core::synthvideo::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let _ = parse_manifest(data);
});
