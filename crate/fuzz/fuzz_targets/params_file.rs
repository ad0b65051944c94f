#![no_main]

use libfuzzer_sys::fuzz_target;
use rgpo_core::policy::Policy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(policy) = Policy::from_text(text) {
        let again = Policy::from_text(&policy.to_text()).expect("written parameters parse");
        assert_eq!(again.arch(), policy.arch());
        assert_eq!(again.num_params(), policy.num_params());
    }
});
