#![no_main]
use gues_core::checkpoint::{decode, CLASSIFIER_MAGIC, GENERATOR_MAGIC};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode(GENERATOR_MAGIC, data);
    let _ = decode(CLASSIFIER_MAGIC, data);
});
