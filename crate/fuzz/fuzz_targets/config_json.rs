#![no_main]

use cbcp_core::io::{config_to_json, parse_config};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        let again = parse_config(&config_to_json(&cfg)).expect("serialized config must parse");
        assert_eq!(again, cfg);
    }
});
