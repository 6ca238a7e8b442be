#![no_main]

use boostret::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = TrainConfig::from_json(text);
});
