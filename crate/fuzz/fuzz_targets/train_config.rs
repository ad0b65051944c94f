#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let again = TrainConfig::from_text(&cfg.to_text()).expect("written config parses");
        assert_eq!(again, cfg);
    }
});
