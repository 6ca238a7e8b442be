#![no_main]

use boostret::report::parse_ablation_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_ablation_csv(text);
});
