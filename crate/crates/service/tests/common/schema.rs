//! Minimal JSON Schema checker covering the keywords docs/api-schema.json uses:
//! `$ref` (local `#/$defs/...`), `type` (string or list), `required`,
//! `properties`, `items`, `enum`, `minimum`, `maximum`, `minItems`, `maxItems`.

use serde_json::Value;

pub struct Schema {
    root: Value,
}

impl Schema {
    pub fn load() -> Self {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/api-schema.json");
        let text = std::fs::read_to_string(path).expect("schema file");
        Self { root: serde_json::from_str(&text).expect("schema parses") }
    }

    /// Validates `value` against `$defs/<def>`; returns every violation.
    pub fn check(&self, def: &str, value: &Value) -> Vec<String> {
        let mut errors = Vec::new();
        let schema = self.root["$defs"][def].clone();
        assert!(!schema.is_null(), "no definition {def}");
        self.walk(&schema, value, def, &mut errors);
        errors
    }

    fn resolve<'a>(&'a self, schema: &'a Value) -> &'a Value {
        match schema.get("$ref").and_then(Value::as_str) {
            Some(r) => {
                let name = r.strip_prefix("#/$defs/").expect("local ref");
                &self.root["$defs"][name]
            }
            None => schema,
        }
    }

    fn walk(&self, schema: &Value, value: &Value, path: &str, errors: &mut Vec<String>) {
        let schema = self.resolve(schema);
        if let Some(t) = schema.get("type") {
            let allowed: Vec<&str> = match t {
                Value::String(s) => vec![s.as_str()],
                Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
                _ => vec![],
            };
            let ok = allowed.iter().any(|t| match *t {
                "object" => value.is_object(),
                "array" => value.is_array(),
                "string" => value.is_string(),
                "number" => value.is_number(),
                "integer" => value.is_u64() || value.is_i64(),
                "boolean" => value.is_boolean(),
                "null" => value.is_null(),
                _ => false,
            });
            if !ok {
                errors.push(format!("{path}: expected {allowed:?}, got {value}"));
                return;
            }
            if value.is_null() {
                return;
            }
        }
        if let Some(options) = schema.get("enum").and_then(Value::as_array) {
            if !options.contains(value) {
                errors.push(format!("{path}: {value} not in enum"));
            }
        }
        if let Some(x) = value.as_f64() {
            if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
                if x < min {
                    errors.push(format!("{path}: {x} < {min}"));
                }
            }
            if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
                if x > max {
                    errors.push(format!("{path}: {x} > {max}"));
                }
            }
        }
        if let Some(items) = value.as_array() {
            if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < min {
                    errors.push(format!("{path}: {} items < {min}", items.len()));
                }
            }
            if let Some(max) = schema.get("maxItems").and_then(Value::as_u64) {
                if (items.len() as u64) > max {
                    errors.push(format!("{path}: {} items > {max}", items.len()));
                }
            }
            if let Some(item_schema) = schema.get("items") {
                for (i, item) in items.iter().enumerate() {
                    self.walk(item_schema, item, &format!("{path}[{i}]"), errors);
                }
            }
        }
        if let Some(obj) = value.as_object() {
            if let Some(required) = schema.get("required").and_then(Value::as_array) {
                for r in required.iter().filter_map(Value::as_str) {
                    if !obj.contains_key(r) {
                        errors.push(format!("{path}: missing {r}"));
                    }
                }
            }
            if let Some(props) = schema.get("properties").and_then(Value::as_object) {
                for (k, s) in props {
                    if let Some(v) = obj.get(k) {
                        self.walk(s, v, &format!("{path}.{k}"), errors);
                    }
                }
            }
        }
    }
}
