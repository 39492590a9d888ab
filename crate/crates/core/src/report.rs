//! JSON report envelope and the `{"re": …, "im": …}` encoding of complex values.

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::C64;

/// `#[serde(with = "crate::report::complex")]` for a single complex field.
pub mod complex {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::C64;

    #[derive(Serialize, Deserialize)]
    struct Parts {
        re: f64,
        im: f64,
    }

    pub fn serialize<S: Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> {
        Parts { re: z.re, im: z.im }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        let p = Parts::deserialize(d)?;
        Ok(C64::new(p.re, p.im))
    }
}

/// Same encoding for `Vec<C64>`.
pub mod complex_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::C64;

    #[derive(Deserialize)]
    struct Parts {
        re: f64,
        im: f64,
    }

    pub fn serialize<S: Serializer>(v: &[C64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for z in v {
            seq.serialize_element(&super::complex_value(*z))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<C64>, D::Error> {
        let raw = Vec::<Parts>::deserialize(d)?;
        Ok(raw.into_iter().map(|p| C64::new(p.re, p.im)).collect())
    }
}

/// Same encoding for a row-major complex matrix.
pub mod complex_matrix {
    use serde::ser::SerializeSeq;
    use serde::Serializer;

    use crate::C64;

    pub fn serialize<S: Serializer>(rows: &[Vec<C64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(rows.len()))?;
        for row in rows {
            let encoded: Vec<_> = row.iter().map(|z| super::complex_value(*z)).collect();
            seq.serialize_element(&encoded)?;
        }
        seq.end()
    }
}

pub fn complex_value(z: C64) -> Value {
    json!({ "re": z.re, "im": z.im })
}

/// Converts any serializable result into a JSON value; non-finite floats
/// become `null` (serde_json's behavior).
pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// The `{config, results, diagnostics, versions, header}` run envelope.
/// Everything except `header` is a pure function of the inputs.
pub fn envelope(command: &str, config: Value, results: Value, diagnostics: Value) -> Value {
    let mut versions = Map::new();
    versions.insert("hida_lab".into(), Value::from(env!("CARGO_PKG_VERSION")));
    versions.insert("report_format".into(), Value::from(1));
    json!({
        "command": command,
        "config": config,
        "results": results,
        "diagnostics": diagnostics,
        "versions": Value::Object(versions),
        "header": { "timestamp_unix": timestamp() },
    })
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Serializes an envelope without its `header`, for byte comparisons.
pub fn without_header(report: &Value) -> Value {
    let mut r = report.clone();
    if let Value::Object(m) = &mut r {
        m.remove("header");
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Holder {
        #[serde(with = "complex")]
        z: C64,
        #[serde(with = "complex_vec")]
        v: Vec<C64>,
    }

    #[test]
    fn complex_encoding_round_trips() {
        let h = Holder {
            z: C64::new(1.5, -0.25),
            v: vec![C64::new(0.0, 1.0), C64::new(-2.0, 3.0)],
        };
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, r#"{"z":{"re":1.5,"im":-0.25},"v":[{"re":0.0,"im":1.0},{"re":-2.0,"im":3.0}]}"#);
        let back: Holder = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn envelope_fields() {
        let e = envelope("spectrum", json!({"k": 1.0}), json!([1, 2]), json!({}));
        for key in ["config", "results", "diagnostics", "versions", "header"] {
            assert!(e.get(key).is_some(), "{key}");
        }
        assert!(without_header(&e).get("header").is_none());
    }
}
