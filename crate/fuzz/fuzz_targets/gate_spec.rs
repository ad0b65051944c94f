#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::gatebank::Gate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(gate) = text.parse::<Gate>() {
        let again: Gate = gate.to_string().parse().expect("displayed gate parses");
        assert_eq!(again, gate);
        let _ = gate.weight(1.0);
    }
});
