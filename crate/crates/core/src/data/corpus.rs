use std::fs;
use std::path::Path;

use crate::data::TokenizerHandle;
use crate::error::{Error, Result};

/// Reads one document per non-blank line, or the `text` field of each line
/// when the file is newline-delimited JSON (`.jsonl` / `.ndjson`, or a first
/// line starting with `{`).
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let raw =
        fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let first = raw.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let json = matches!(ext, "jsonl" | "ndjson") || first.trim_start().starts_with('{');
    let mut docs = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if json {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let text = v
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::Input(format!("{}:{}: missing string field `text`", path.display(), n + 1)))?;
            docs.push(text.to_string());
        } else {
            docs.push(line.to_string());
        }
    }
    Ok(docs)
}

/// Encodes each document (with its end token) and concatenates in order.
pub fn tokenize_documents(docs: &[String], tok: &TokenizerHandle) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(tok.encode(d)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn plain_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "first doc\n\nsecond doc\n").unwrap();
        assert_eq!(read_documents(&p).unwrap(), vec!["first doc", "second doc"]);
        let j = dir.path().join("c.jsonl");
        let mut f = fs::File::create(&j).unwrap();
        writeln!(f, "{{\"text\": \"a b\", \"id\": 1}}").unwrap();
        writeln!(f, "{{\"text\": \"c\"}}").unwrap();
        assert_eq!(read_documents(&j).unwrap(), vec!["a b", "c"]);
        fs::write(&j, "{\"body\": 1}\n").unwrap();
        assert!(read_documents(&j).is_err());
        assert!(read_documents(&dir.path().join("missing.txt")).is_err());
    }
}
