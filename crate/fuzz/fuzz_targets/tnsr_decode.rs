#![no_main]

use fmfilter_tensor::io::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        let again = decode(&encode(&t)).expect("re-encoded tensor must decode");
        assert_eq!(encode(&again), encode(&t));
    }
});
