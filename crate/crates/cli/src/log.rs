//! Line-delimited JSON records on stderr.

use serde_json::{json, Map, Value};

pub fn event(name: &str, fields: Value) {
    let mut rec = Map::new();
    rec.insert("level".into(), json!("info"));
    rec.insert("event".into(), json!(name));
    if let Value::Object(m) = fields {
        rec.extend(m);
    }
    eprintln!("{}", Value::Object(rec));
}

pub fn error(msg: &str, category: &str) {
    eprintln!("{}", json!({ "level": "error", "category": category, "message": msg }));
}
