#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::prefalign::{kl_ref_slope, parse_align_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_align_csv(data) {
        let _ = kl_ref_slope(&rows);
    }
});
