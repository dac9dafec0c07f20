//! Line-delimited JSON datasets: one [`Record`] per line,
//! `{"id", "grid", "turns", "format"}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Record;
use crate::error::{Error, Result};

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub(crate) fn parse_dataset(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Dataset {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, DataConfig, Format};

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        for format in Format::ALL {
            let recs = gen_corpus(&DataConfig { count: 10, format, ..DataConfig::default() }).unwrap();
            write_dataset(&path, &recs).unwrap();
            assert_eq!(read_dataset(&path).unwrap(), recs);
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn truncated_last_line_reports_its_number() {
        let recs = gen_corpus(&DataConfig { count: 3, ..DataConfig::default() }).unwrap();
        let mut text = String::new();
        for r in &recs {
            text.push_str(&serde_json::to_string(r).unwrap());
            text.push('\n');
        }
        text.truncate(text.len() - 10);
        match parse_dataset(&text) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn golden_sample_matches_generator() {
        let golden = include_str!("../../testdata/sample.jsonl");
        let recs = gen_corpus(&DataConfig { count: 3, seed: 42, ..DataConfig::default() }).unwrap();
        assert_eq!(parse_dataset(golden).unwrap(), recs);
    }
}
