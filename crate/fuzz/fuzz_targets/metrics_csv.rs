#![no_main]

use boostret::trainer::history::parse_metrics_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_metrics_csv(text);
});
