#![no_main]

use libfuzzer_sys::fuzz_target;
use sleepgate::data::{deserialize, serialize};

fuzz_target!(|text: &str| {
    // Anything that parses must survive a round trip unchanged.
    if let Ok(eps) = deserialize(text) {
        let again = deserialize(&serialize(&eps)).expect("re-parse of serialized episodes");
        assert_eq!(again, eps);
    }
});
