use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use super::{CorpusError, CorpusRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct JsonlRead {
    pub records: Vec<CorpusRecord>,
    /// Lines skipped as malformed or missing code.
    pub skipped: usize,
}

fn field<'a>(obj: &'a Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| obj.get(*n).and_then(Value::as_str))
}

/// Reads one JSON object per line. `code` may be spelled `function`, `doc`
/// may be spelled `docstring`. Lines without code are skipped and counted.
pub fn read_jsonl(path: &Path) -> Result<JsonlRead, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Option<CorpusRecord> = serde_json::from_str::<Value>(line).ok().and_then(|obj| {
            let code = field(&obj, &["code", "function"]).filter(|c| !c.trim().is_empty())?;
            let doc = field(&obj, &["docstring", "doc"]).unwrap_or("");
            let lang = field(&obj, &["lang", "language"]).unwrap_or("minipy");
            Some(CorpusRecord::new(code, doc, lang))
        });
        match parsed {
            Some(r) => records.push(r),
            None => {
                skipped += 1;
                log::warn!("{}:{}: skipped malformed record", path.display(), lineno + 1);
            }
        }
    }
    Ok(JsonlRead { records, skipped })
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let line = json!({"id": r.id, "code": r.code, "docstring": r.doc, "lang": r.lang});
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}
