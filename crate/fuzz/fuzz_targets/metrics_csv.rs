#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::diagnostics::parse_metrics;

fuzz_target!(|data: &[u8]| {
    let _ = parse_metrics(data);
});
