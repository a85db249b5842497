//! Canonical structured-text output.
//!
//! Keys keep insertion order, scalars are rendered with exactly six decimal
//! digits, indentation is two spaces and lines end with `\n`. Output is a
//! valid JSON document, so it can be read back with any JSON parser.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    /// Rendered with six decimal digits.
    Num(f64),
    Str(String),
    Arr(Vec<Value>),
    Obj(Vec<(String, Value)>),
}

impl Value {
    pub fn obj() -> ObjBuilder {
        ObjBuilder(Vec::new())
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn opt<T>(v: Option<T>, f: impl FnOnce(T) -> Value) -> Value {
        v.map(f).unwrap_or(Value::Null)
    }

    /// Renders the value as a complete document with a trailing newline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        write_value(&mut out, self, 0);
        out.push('\n');
        out
    }
}

pub struct ObjBuilder(Vec<(String, Value)>);

impl ObjBuilder {
    pub fn field(mut self, key: &str, value: Value) -> Self {
        self.0.push((key.to_string(), value));
        self
    }

    pub fn build(self) -> Value {
        Value::Obj(self.0)
    }
}

/// Six-digit fixed rendering; negative zero prints as zero.
pub fn format_scalar(v: f64) -> String {
    if !v.is_finite() {
        return "null".to_string();
    }
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_value(out: &mut String, v: &Value, level: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Num(x) => out.push_str(&format_scalar(*x)),
        Value::Str(s) => out.push_str(&serde_json::to_string(s).expect("string encodes")),
        Value::Arr(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // scalar arrays stay on one line
            if items
                .iter()
                .all(|i| !matches!(i, Value::Arr(_) | Value::Obj(_)))
            {
                out.push('[');
                for (n, item) in items.iter().enumerate() {
                    if n > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, item, level);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (n, item) in items.iter().enumerate() {
                indent(out, level + 1);
                write_value(out, item, level + 1);
                if n + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(out, level);
            out.push(']');
        }
        Value::Obj(fields) => {
            if fields.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (n, (k, item)) in fields.iter().enumerate() {
                indent(out, level + 1);
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push_str(": ");
                write_value(out, item, level + 1);
                if n + 1 < fields.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(out, level);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_digit_scalars() {
        assert_eq!(format_scalar(0.5), "0.500000");
        assert_eq!(format_scalar(-0.0), "0.000000");
        assert_eq!(format_scalar(1.0 / 3.0), "0.333333");
    }

    #[test]
    fn nested_layout_is_stable_json() {
        let v = Value::obj()
            .field("a", Value::Int(1))
            .field("b", Value::Arr(vec![Value::Num(0.25), Value::Null]))
            .field("c", Value::obj().field("d", Value::str("x\"y")).build())
            .field("e", Value::Arr(vec![]))
            .build();
        let text = v.render();
        assert_eq!(
            text,
            "{\n  \"a\": 1,\n  \"b\": [0.250000, null],\n  \"c\": {\n    \"d\": \"x\\\"y\"\n  },\n  \"e\": []\n}\n"
        );
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["c"]["d"], "x\"y");
    }
}
