#![no_main]

use libfuzzer_sys::fuzz_target;
use temporal_core::vos::AdapterRequest;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(req) = AdapterRequest::parse_line(line) {
            assert_eq!(AdapterRequest::parse_line(&req.to_line()).unwrap(), req);
        }
    }
});
