#![no_main]

use libfuzzer_sys::fuzz_target;
use sleepgate::eval::parse_results_csv;

fuzz_target!(|text: &str| {
    let _ = parse_results_csv(text);
});
