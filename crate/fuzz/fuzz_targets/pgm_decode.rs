#![no_main]

use libfuzzer_sys::fuzz_target;
use temporal_core::synthvideo::pgm::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, samples)) = decode(data) {
        assert_eq!(samples.len(), w * h);
        assert_eq!(decode(&encode(w, h, &samples)).unwrap(), (w, h, samples));
    }
});
