#![no_main]

use libfuzzer_sys::fuzz_target;
use sleepgate::HyperParams;

fuzz_target!(|text: &str| {
    if let Ok(hp) = HyperParams::parse(text) {
        assert_eq!(HyperParams::parse(&hp.to_text()).expect("re-parse resolved config"), hp);
    }
});
