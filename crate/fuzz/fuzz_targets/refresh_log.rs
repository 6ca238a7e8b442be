#![no_main]

use boostret::trainer::history::parse_refresh_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_refresh_jsonl(text);
});
