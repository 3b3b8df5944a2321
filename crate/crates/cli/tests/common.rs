use std::path::PathBuf;

use jsonschema::JSONSchema;
use serde_json::Value;

pub fn schema(name: &str) -> JSONSchema {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    JSONSchema::compile(&v).unwrap()
}

pub fn assert_valid(name: &str, text: &str) {
    let v: Value = serde_json::from_str(text).unwrap();
    let s = schema(name);
    let msgs: Vec<String> = match s.validate(&v) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{name} schema rejects output: {msgs:?}");
}
