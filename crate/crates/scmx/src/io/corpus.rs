//! JSONL corpus loading: one object per line with `id`, `prompt`,
//! `reference`, and an optional normalized `answer`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub prompt: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

fn parse_line(line: &str, line_no: usize) -> Result<CorpusEntry> {
    let entry: CorpusEntry =
        serde_json::from_str(line).map_err(|e| Error::CorpusLine {
            line: line_no,
            reason: e.to_string(),
        })?;
    if entry.prompt.is_empty() || entry.reference.is_empty() {
        return Err(Error::CorpusLine {
            line: line_no,
            reason: "prompt and reference must be non-empty".to_string(),
        });
    }
    Ok(entry)
}

/// Parses a corpus from any reader; the first malformed line aborts with
/// an error naming the line.
pub fn read_corpus<R: Read>(reader: R) -> Result<Vec<CorpusEntry>> {
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(parse_line(&line, i + 1)?);
    }
    Ok(entries)
}

pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Vec<CorpusEntry>> {
    read_corpus(File::open(path)?)
}

/// Lenient variant: collects every valid line and reports the broken ones
/// alongside instead of failing outright.
pub fn load_corpus_lenient<P: AsRef<Path>>(path: P) -> Result<(Vec<CorpusEntry>, Vec<Error>)> {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, i + 1) {
            Ok(e) => entries.push(e),
            Err(e) => errors.push(e),
        }
    }
    Ok((entries, errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"id":"a","prompt":"Q1","reference":"R1","answer":"1"}
{"id":"b","prompt":"Q2","reference":"R2"}
{"id":"c","prompt":"Q3","reference":"R3","answer":"3"}
"#;

    #[test]
    fn valid_file_loads_in_order() {
        let entries = read_corpus(GOOD.as_bytes()).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].id, "a");
        assert_eq!(entries[1].answer, None);
        assert_eq!(entries[2].answer.as_deref(), Some("3"));
    }

    #[test]
    fn missing_prompt_names_the_line() {
        let bad = "{\"id\":\"a\",\"prompt\":\"x\",\"reference\":\"y\"}\n{\"id\":\"b\",\"reference\":\"y\"}\n";
        let err = read_corpus(bad.as_bytes()).unwrap_err();
        match err {
            Error::CorpusLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_sequence() {
        assert!(read_corpus("".as_bytes()).unwrap().is_empty());
        assert!(read_corpus("\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let bad = "{\"id\":\"a\",\"prompt\":\"\",\"reference\":\"y\"}\n";
        assert!(matches!(
            read_corpus(bad.as_bytes()).unwrap_err(),
            Error::CorpusLine { line: 1, .. }
        ));
    }

    #[test]
    fn lenient_mode_recovers_valid_lines() {
        let mixed = "{\"id\":\"a\",\"prompt\":\"x\",\"reference\":\"y\"}\nnot json\n{\"id\":\"c\",\"prompt\":\"x\",\"reference\":\"y\"}\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, mixed).unwrap();
        let (entries, errors) = load_corpus_lenient(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(errors.len(), 1);
        assert_eq!(entries[1].id, "c");
    }
}
