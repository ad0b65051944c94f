#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::prefalign::AlignConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = AlignConfig::from_text(text) {
        let again = AlignConfig::from_text(&cfg.to_text()).expect("written config parses");
        assert_eq!(again, cfg);
    }
});
