#![no_main]

use boostret::trainer::checkpoint::CheckpointMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = CheckpointMeta::from_json(text);
});
