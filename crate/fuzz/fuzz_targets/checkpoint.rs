#![no_main]

use libfuzzer_sys::fuzz_target;
use sleepgate::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        let bytes = encode(&params).expect("encode decoded store");
        assert_eq!(decode(&bytes).expect("decode re-encoded store"), params);
    }
});
