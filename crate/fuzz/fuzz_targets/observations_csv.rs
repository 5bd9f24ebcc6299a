#![no_main]

use cbcp_core::calibration::{fit_pwl_latency, parse_observations_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(obs) = parse_observations_csv(text) else { return };
    if obs.len() <= 200 {
        let _ = fit_pwl_latency(&obs, 1650.0);
    }
});
