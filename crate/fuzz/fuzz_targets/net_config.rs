#![no_main]

use fmfilter::networks::NetConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<NetConfig>(data) {
        if c.validate().is_ok() {
            let _ = (c.feature_size(), c.motion_grid());
        }
    }
});
