//! Shortest round-trip text for `f64`.

use serde_json::Value;

/// Shortest decimal that parses back to the same bits (`NaN`, `inf`, `-inf`
/// for non-finite values).
pub fn fmt_f64(v: f64) -> String {
    ryu::Buffer::new().format(v).to_owned()
}

/// Empty string for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// JSON number, or `null` when not finite.
pub fn json_num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}
