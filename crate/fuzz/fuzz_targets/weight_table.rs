#![no_main]

use boostret::mining::WeightTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = WeightTable::from_json(text, 1.6, 0);
});
