use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One product: long title, optional gold short title, attribute tags and
/// either a stored image feature vector or an opaque image reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductRecord {
    pub long_title: Vec<String>,
    pub short_title: Option<Vec<String>>,
    pub attr_tags: Vec<String>,
    pub image_features: Option<Vec<f64>>,
    pub image_ref: Option<String>,
    pub category: String,
}

impl ProductRecord {
    pub fn new(long_title: Vec<String>, short_title: Option<Vec<String>>, attr_tags: Vec<String>) -> Self {
        ProductRecord {
            long_title,
            short_title,
            attr_tags,
            image_features: None,
            image_ref: None,
            category: String::new(),
        }
    }

    /// Short human-readable label used in error messages.
    pub fn label(&self) -> String {
        let head: Vec<&str> = self.long_title.iter().take(6).map(String::as_str).collect();
        let more = if self.long_title.len() > 6 { " ..." } else { "" };
        format!("\"{}{more}\"", head.join(" "))
    }

    pub fn validate(&self) -> Result<()> {
        if self.long_title.is_empty() {
            return Err(Error::data("long_title is empty"));
        }
        if matches!(&self.short_title, Some(s) if s.is_empty()) {
            return Err(Error::data("short_title is present but empty"));
        }
        let short = self.short_title.iter().flatten();
        for t in self.long_title.iter().chain(short).chain(&self.attr_tags) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid token {t:?}")));
            }
        }
        if let Some(f) = &self.image_features {
            if let Some(i) = f.iter().position(|x| !x.is_finite()) {
                return Err(Error::data(format!("image_features[{i}] is not finite")));
            }
        }
        Ok(())
    }
}

/// Wire form of one corpus line. Token lists are whitespace-joined strings.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    long_title: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    short_title: Option<String>,
    attr_tags: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_features: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
    category: String,
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl From<&ProductRecord> for RecordLine {
    fn from(r: &ProductRecord) -> Self {
        RecordLine {
            long_title: r.long_title.join(" "),
            short_title: r.short_title.as_ref().map(|s| s.join(" ")),
            attr_tags: r.attr_tags.join(" "),
            image_features: r.image_features.clone(),
            image_ref: r.image_ref.clone(),
            category: r.category.clone(),
        }
    }
}

const MANDATORY: [&str; 3] = ["long_title", "attr_tags", "category"];

/// Parses one JSON object into a record. Unknown keys are ignored so that
/// files produced by `generate` (which add `generated_short_title`) load.
pub(crate) fn parse_record_object(obj: &Map<String, Value>) -> Result<ProductRecord> {
    for key in MANDATORY {
        if !obj.contains_key(key) {
            return Err(Error::data(format!("missing {key}")));
        }
    }
    let line: RecordLine = serde_json::from_value(Value::Object(obj.clone()))
        .map_err(|e| Error::data(e.to_string()))?;
    let record = ProductRecord {
        long_title: split(&line.long_title),
        short_title: line.short_title.as_deref().map(split),
        attr_tags: split(&line.attr_tags),
        image_features: line.image_features,
        image_ref: line.image_ref,
        category: line.category,
    };
    record.validate()?;
    Ok(record)
}

pub(crate) fn read_json_lines(path: &Path) -> Result<Vec<(usize, Map<String, Value>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {n}: malformed JSON: {e}")))?;
        match value {
            Value::Object(obj) => out.push((n, obj)),
            _ => return Err(Error::data(format!("line {n}: expected a JSON object"))),
        }
    }
    Ok(out)
}

/// Reads one record per line.
pub fn load_corpus(path: &Path) -> Result<Vec<ProductRecord>> {
    read_json_lines(path)?
        .into_iter()
        .map(|(n, obj)| {
            parse_record_object(&obj).map_err(|e| Error::data(format!("line {n}: {e}")))
        })
        .collect()
}

/// Key under which `generate` stores its output title.
pub const GENERATED_KEY: &str = "generated_short_title";

/// Like [`load_corpus`], also returning each line's generated title if present.
pub fn load_generated(path: &Path) -> Result<Vec<(ProductRecord, Option<Vec<String>>)>> {
    read_json_lines(path)?
        .into_iter()
        .map(|(n, obj)| {
            let at = |e: Error| Error::data(format!("line {n}: {e}"));
            let record = parse_record_object(&obj).map_err(at)?;
            let generated = match obj.get(GENERATED_KEY) {
                None => None,
                Some(Value::String(s)) => Some(split(s)),
                Some(_) => return Err(at(Error::data(format!("{GENERATED_KEY} must be a string")))),
            };
            Ok((record, generated))
        })
        .collect()
}

/// Writes records with an added generated title per line.
pub fn save_generated(rows: &[(ProductRecord, Vec<String>)], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (r, generated) in rows {
        let mut value = record_to_json(r);
        if let Value::Object(obj) = &mut value {
            obj.insert(GENERATED_KEY.into(), Value::String(generated.join(" ")));
        }
        writeln!(w, "{value}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn record_to_json(record: &ProductRecord) -> Value {
    serde_json::to_value(RecordLine::from(record)).expect("record serialises")
}

pub fn save_corpus(records: &[ProductRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        r.validate()?;
        let line = serde_json::to_string(&RecordLine::from(r)).expect("record serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn missing_long_title_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let good = r#"{"long_title":"a b","attr_tags":"a","category":"x"}"#;
        let bad = r#"{"attr_tags":"a","category":"x"}"#;
        let body = [good; 6].join("\n") + "\n" + bad + "\n";
        let err = load_corpus(&write(&dir, &body)).unwrap_err();
        assert_eq!(err.to_string(), "line 7: missing long_title");
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"long_title\":\"a\",\"attr_tags\":\"\",\"category\":\"x\"}\n{oops\n";
        let err = load_corpus(&write(&dir, body)).unwrap_err();
        assert!(err.to_string().starts_with("line 2: malformed JSON"), "{err}");
    }

    #[test]
    fn thirteen_token_title_loads_with_k13() {
        let dir = tempfile::tempdir().unwrap();
        let title: Vec<String> = (0..13).map(|i| format!("t{i}")).collect();
        let body = format!(
            "{{\"long_title\":\"{}\",\"short_title\":\"t0 t3\",\"attr_tags\":\"t0\",\"category\":\"c\"}}\n",
            title.join(" ")
        );
        let recs = load_corpus(&write(&dir, &body)).unwrap();
        assert_eq!(recs[0].long_title.len(), 13);
        assert_eq!(recs[0].short_title.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn empty_long_title_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"long_title\":\"  \",\"attr_tags\":\"\",\"category\":\"x\"}\n";
        let err = load_corpus(&write(&dir, body)).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn non_finite_features_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ProductRecord::new(vec!["a".into()], None, vec![]);
        r.image_features = Some(vec![0.0, f64::NAN]);
        assert!(save_corpus(&[r], &dir.path().join("x.jsonl")).is_err());
    }

    #[test]
    fn round_trip_preserves_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut a = ProductRecord::new(vec!["半".into(), "S110061Q".into()], Some(vec!["半".into()]), vec!["x".into()]);
        a.image_features = Some(vec![0.1, -2.5e-7, 1.0 / 3.0]);
        a.category = "shirt".into();
        let mut b = ProductRecord::new(vec!["z".into()], None, vec![]);
        b.image_ref = Some("img/001.jpg".into());
        save_corpus(&[a.clone(), b.clone()], &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![a, b]);
    }
}
