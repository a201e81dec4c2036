//! Corpus files: one record per line, `FAMILY=VALUE[,FAMILY=VALUE]*\t<text>`.

use super::{CorpusError, LabeledSentence};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct CorpusLoad {
    pub sentences: Vec<LabeledSentence>,
    pub diagnostics: Vec<LineDiagnostic>,
}

pub fn save_corpus(path: &Path, sentences: &[LabeledSentence]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in sentences {
        let labels: Vec<String> = s.labels.iter().map(|(f, v)| format!("{f}={v}")).collect();
        out.push_str(&labels.join(","));
        out.push('\t');
        out.push_str(&s.text);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a corpus file. Lines that fail to parse become diagnostics with
/// their line number; an empty file yields an empty list plus a warning.
pub fn load_external_corpus(path: &Path) -> Result<CorpusLoad, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut sentences = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((label_part, sentence)) = line.split_once('\t') else {
            diagnostics.push(LineDiagnostic {
                line: line_no,
                reason: "missing tab separator between labels and text".into(),
            });
            continue;
        };
        let mut labels = BTreeMap::new();
        let mut bad = None;
        for pair in label_part.split(',') {
            match pair.split_once('=') {
                Some((f, v)) if !f.is_empty() && !v.is_empty() => {
                    labels.insert(f.trim().to_string(), v.trim().to_string());
                }
                _ => {
                    bad = Some(format!("malformed label {pair:?}"));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            diagnostics.push(LineDiagnostic { line: line_no, reason });
            continue;
        }
        if sentence.trim().is_empty() {
            diagnostics.push(LineDiagnostic {
                line: line_no,
                reason: "empty sentence text".into(),
            });
            continue;
        }
        sentences.push(LabeledSentence {
            text: sentence.trim().to_string(),
            labels,
        });
    }
    if sentences.is_empty() && diagnostics.is_empty() {
        diagnostics.push(LineDiagnostic {
            line: 0,
            reason: "file contains no records".into(),
        });
    }
    Ok(CorpusLoad {
        sentences,
        diagnostics,
    })
}
