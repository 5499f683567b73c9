use std::path::Path;

use crate::error::{BldError, Result};

/// Samples read from a line-delimited corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Vec<u8>>,
    /// Empty lines that were dropped.
    pub skipped: usize,
}

/// Splits raw bytes on `\n`; every non-empty line is one sample, kept
/// byte for byte.
pub fn parse_corpus(data: &[u8]) -> Corpus {
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut lines: Vec<&[u8]> = data.split(|&b| b == b'\n').collect();
    // A trailing newline terminates the last line rather than opening one.
    if data.ends_with(b"\n") {
        lines.pop();
    }
    for line in lines {
        if line.is_empty() {
            skipped += 1;
        } else {
            samples.push(line.to_vec());
        }
    }
    Corpus { samples, skipped }
}

pub fn ingest(path: &Path) -> Result<Corpus> {
    let data = std::fs::read(path).map_err(|e| BldError::io(path, e))?;
    let corpus = parse_corpus(&data);
    if corpus.samples.is_empty() {
        return Err(BldError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(corpus)
}

/// Writes samples one per line. Samples must not contain `\n`.
pub fn write_corpus(path: &Path, samples: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        if s.contains(&b'\n') {
            return Err(BldError::Config(
                "corpus samples cannot contain newlines".into(),
            ));
        }
        out.extend_from_slice(s);
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| BldError::io(path, e))
}
