use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user's chronological history (oldest first) and self-introduction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub self_intro: String,
    #[serde(rename = "tweets")]
    pub history: Vec<String>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UserRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(f))
}

/// Parses one record per non-blank line; errors carry the 1-based line number.
pub fn parse_jsonl<R: BufRead>(r: R) -> Result<Vec<UserRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[UserRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_and_reports_line() {
        let src = "{\"user_id\":\"u1\",\"self_intro\":\"hi\",\"tweets\":[\"a\",\"b\"]}\n\n{\"user_id\": 3}\n";
        let err = parse_jsonl(src.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let ok = parse_jsonl(src.lines().next().unwrap().as_bytes()).unwrap();
        assert_eq!(ok[0].history, ["a", "b"]);
    }
}
