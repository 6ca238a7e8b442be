#![no_main]

use boostret::binfmt::{decode_f32, encode_f32};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_f32(data) {
        let bytes = encode_f32(&m).unwrap();
        assert_eq!(bytes, data);
    }
});
