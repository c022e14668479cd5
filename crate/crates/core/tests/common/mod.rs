#![allow(dead_code)]

pub mod asan_oracle;
pub mod greedy_oracle;
pub mod programs;
pub mod wire;

use taemu::manager::TaInstance;
use taemu::taelf::{assemble_full, Assembly, StaticAnnotationConfig};
use taemu::vtee::ApiRegistry;

pub fn fixture_src(name: &str) -> String {
    let path = format!("{}/fixtures/{name}.s", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn assembly(name: &str) -> Assembly {
    assemble_full(&fixture_src(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn instance(name: &str) -> TaInstance {
    instance_with(name, ApiRegistry::with_extensions())
}

pub fn instance_with(name: &str, registry: ApiRegistry) -> TaInstance {
    let config = std::fs::read_to_string(format!("{}/fixtures/{name}.cfg", env!("CARGO_MANIFEST_DIR")))
        .ok()
        .map(|t| StaticAnnotationConfig::parse(&t).unwrap());
    TaInstance::new(&assembly(name).file, config.as_ref(), registry).unwrap()
}

/// Opens a session with no parameters.
pub fn session(inst: &mut TaInstance) -> u32 {
    inst.open_session(&taemu::manager::GpParamSet::empty())
        .map(|(id, _)| id)
        .unwrap_or_else(|r| panic!("open failed: {r:?}"))
}

/// Keyinstall record: magic, key count at word 17, key at word 22.
pub fn key_record(count: u32, key: u32) -> Vec<u8> {
    let mut words = [0u32; 24];
    words[0] = 0x4d50_424b;
    words[17] = count;
    words[22] = key;
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}
