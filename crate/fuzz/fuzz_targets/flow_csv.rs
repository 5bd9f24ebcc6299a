#![no_main]

use cbcp_core::io::{flow_csv, parse_flow_csv, parse_instance_json};
use cbcp_core::model::{validate, Instance, Scheme};
use libfuzzer_sys::fuzz_target;
use std::sync::OnceLock;

fn instance() -> &'static Instance {
    static INSTANCE: OnceLock<Instance> = OnceLock::new();
    INSTANCE.get_or_init(|| parse_instance_json(include_str!("../corpus/instance_json/two_groups.json")).unwrap())
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let inst = instance();
    let Ok(flow) = parse_flow_csv(inst, text) else { return };
    let scheme = Scheme::uniform(1.0, inst.horizon(), 1.0).unwrap();
    let _ = validate(inst, &scheme, &flow);
    let again = parse_flow_csv(inst, &flow_csv(inst, &flow)).expect("written flows must parse");
    assert_eq!(again, flow);
});
