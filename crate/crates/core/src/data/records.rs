//! Line-delimited JSON record files.

use std::fs;
use std::path::Path;

use super::corpus::Record;
use crate::error::{Error, Result};

pub const REQUIRED_KEYS: [&str; 6] = ["kind", "entity_id", "prompt", "response", "split", "noise_seed"];

pub fn to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: line_no, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse("expected a JSON object".into()))?;
        if let Some(key) = REQUIRED_KEYS.iter().find(|k| !obj.contains_key(**k)) {
            return Err(parse(format!("missing required key `{key}`")));
        }
        out.push(serde_json::from_value(value).map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

pub fn serialize(records: &[Record], path: &Path) -> Result<()> {
    fs::write(path, to_jsonl(records)).map_err(|e| Error::io(path, e))
}

pub fn deserialize(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_stage1_pairs, gen_stage2_mixed, World};

    #[test]
    fn round_trip_is_byte_identical() {
        let w = World::build(0, 128).unwrap();
        let mut recs = gen_stage1_pairs(&w, 500);
        recs.extend(gen_stage2_mixed(&w, 300, 200));
        assert_eq!(recs.len(), 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        serialize(&recs, &path).unwrap();
        let back = deserialize(&path).unwrap();
        assert_eq!(back, recs);
        let path2 = dir.path().join("r2.jsonl");
        serialize(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn missing_key_names_the_key_and_line() {
        let good = r#"{"kind":"probe","entity_id":3,"prompt":"p","response":"r","split":"held_out","noise_seed":null}"#;
        let bad = r#"{"kind":"probe","entity_id":3,"prompt":"p","split":"held_out","noise_seed":null}"#;
        let err = from_jsonl(&format!("{good}\n{bad}\n")).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("response"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = from_jsonl("\n{not json}\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn trailing_newline_is_accepted() {
        let line = r#"{"kind":"text_inst","entity_id":null,"prompt":"p","response":"r","split":"train","noise_seed":null}"#;
        assert_eq!(from_jsonl(&format!("{line}\n")).unwrap().len(), 1);
        assert_eq!(from_jsonl(line).unwrap().len(), 1);
    }
}
