#![no_main]

use cbcp_core::equilibrium::{solve_equilibrium, SolverOptions};
use cbcp_core::io::{instance_to_json, parse_instance_json};
use cbcp_core::model::Scheme;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(instance) = parse_instance_json(text) else { return };
    let back = parse_instance_json(&instance_to_json(&instance)).expect("serialized instance must parse");
    assert_eq!(back, instance);
    if instance.horizon() > 16 || instance.groups().len() > 16 {
        return;
    }
    let scheme = Scheme::uniform(1.0, instance.horizon(), 1.0).unwrap();
    let opts = SolverOptions { max_iters: 20, ..Default::default() };
    let _ = solve_equilibrium(&instance, &scheme, &opts);
});
