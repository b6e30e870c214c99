#![no_main]

use fmfilter::image::{decode, encode, ImageMode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mode = if t.shape()[0] == 3 { ImageMode::Rgb } else { ImageMode::Gray };
        let back = decode(&encode(&t, mode).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
    }
});
