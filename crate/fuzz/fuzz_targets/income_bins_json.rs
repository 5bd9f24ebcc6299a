#![no_main]

use cbcp_core::calibration::parse_income_bins_json;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(bins) = parse_income_bins_json(text) else { return };
    let _ = bins.mean_vot(2.0);
    for u in [0.0, 0.17, 0.5, 1.0] {
        let _ = bins.quantile(2.0, u);
    }
});
