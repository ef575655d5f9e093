use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{label_name, parse_label, AbsaInstance, Dataset};
use crate::error::{CvibError, Result};

/// On-disk record: `{"text", "aspect", "aspect_start", "aspect_end", "label"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub text: String,
    pub aspect: String,
    pub aspect_start: usize,
    pub aspect_end: usize,
    pub label: String,
}

impl From<&AbsaInstance> for JsonlRecord {
    fn from(x: &AbsaInstance) -> Self {
        JsonlRecord {
            text: x.text.join(" "),
            aspect: x.aspect.join(" "),
            aspect_start: x.aspect_start,
            aspect_end: x.aspect_end,
            label: label_name(x.label),
        }
    }
}

impl JsonlRecord {
    fn into_instance(self) -> std::result::Result<AbsaInstance, String> {
        let label = parse_label(&self.label)
            .ok_or_else(|| format!("unknown label {:?}", self.label))?;
        let inst = AbsaInstance {
            text: self.text.split_whitespace().map(String::from).collect(),
            aspect: self.aspect.split_whitespace().map(String::from).collect(),
            aspect_start: self.aspect_start,
            aspect_end: self.aspect_end,
            label,
        };
        inst.validate(usize::MAX).map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

/// Reads one record per non-blank line. Errors carry the 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CvibError::io(path, e))?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CvibError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CvibError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        instances.push(record.into_instance().map_err(parse_err)?);
    }
    Ok(Dataset::new(instances))
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CvibError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in dataset.iter() {
        let line = serde_json::to_string(&JsonlRecord::from(inst))?;
        writeln!(out, "{line}").map_err(|e| CvibError::io(path, e))?;
    }
    out.flush().map_err(|e| CvibError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const GOOD: &str = r#"{"text": "the food was great", "aspect": "food", "aspect_start": 1, "aspect_end": 2, "label": "positive"}
{"text": "service slow", "aspect": "service", "aspect_start": 0, "aspect_end": 1, "label": "negative"}
{"text": "it is a table", "aspect": "table", "aspect_start": 3, "aspect_end": 4, "label": "neutral"}
"#;

    #[test]
    fn loads_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, GOOD).unwrap();
        let ds = load_jsonl(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), vec![0, 1, 2]);
        assert_eq!(ds.instances[0].aspect, vec!["food"]);
    }

    #[test]
    fn missing_aspect_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let bad = GOOD.replace(r#""aspect": "service", "#, "");
        fs::write(&p, bad).unwrap();
        match load_jsonl(&p) {
            Err(CvibError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("aspect"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, GOOD.replace("neutral", "conflict")).unwrap();
        match load_jsonl(&p) {
            Err(CvibError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("conflict"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_jsonl("/nonexistent/x.jsonl"),
            Err(CvibError::Io { .. })
        ));
    }
}
