#![no_main]

use boostret::binfmt::{decode_f64, encode_f64};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_f64(data) {
        let bytes = encode_f64(&m).unwrap();
        assert_eq!(bytes, data);
    }
});
