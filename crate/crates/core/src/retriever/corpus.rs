use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IndexError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub body: String,
    pub title: String,
}

#[derive(Debug, Default)]
pub struct CorpusLoad {
    pub records: Vec<CorpusRecord>,
    /// 1-based line numbers skipped in lenient mode.
    pub skipped: Vec<usize>,
}

/// Reads `id<TAB>text<TAB>title` lines. A first line starting with `id` is a
/// header. In strict mode the first malformed line is an error; otherwise it
/// is skipped with a warning.
pub fn read_corpus<R: BufRead>(reader: R, strict: bool) -> Result<CorpusLoad, IndexError> {
    let mut load = CorpusLoad::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line_no == 1 && line.starts_with("id") {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(record) => load.records.push(record),
            Err(reason) if strict => {
                return Err(IndexError::MalformedLine { line: line_no, reason });
            }
            Err(reason) => {
                log::warn!("skipping corpus line {line_no}: {reason}");
                load.skipped.push(line_no);
            }
        }
    }
    Ok(load)
}

pub fn read_corpus_file(path: &Path, strict: bool) -> Result<CorpusLoad, IndexError> {
    read_corpus(BufReader::new(File::open(path)?), strict)
}

fn parse_line(line: &str) -> Result<CorpusRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(format!("expected 3 tab-separated columns, found {}", cols.len()));
    }
    let doc_id = cols[0].trim();
    if doc_id.is_empty() {
        return Err("empty id".into());
    }
    Ok(CorpusRecord {
        doc_id: doc_id.to_string(),
        body: unquote(cols[1]),
        title: unquote(cols[2]),
    })
}

// Passage dumps quote fields CSV-style: "text with ""quotes"" inside".
fn unquote(field: &str) -> String {
    match field.strip_prefix('"').and_then(|f| f.strip_suffix('"')) {
        Some(inner) if field.len() >= 2 => inner.replace("\"\"", "\""),
        _ => field.to_string(),
    }
}
