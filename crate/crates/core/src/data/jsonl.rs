//! JSON Lines dataset files.
//!
//! One object per line:
//! `{"tokens": [..], "labels": ["B-POS", ..], "image": {"h", "w", "c", "values"}}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MultimodalExample;
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};
use crate::mcl::BioLabel;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    h: usize,
    w: usize,
    c: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<usize>,
    labels: Vec<String>,
    image: ImageRecord,
}

fn from_record(r: Record) -> Result<MultimodalExample> {
    let labels = r
        .labels
        .iter()
        .map(|s| s.parse::<BioLabel>())
        .collect::<Result<Vec<_>>>()?;
    let image = PatchGrid::new(r.image.h, r.image.w, r.image.c, r.image.values)?;
    let ex = MultimodalExample {
        tokens: r.tokens,
        labels,
        image,
    };
    ex.validate()?;
    Ok(ex)
}

fn to_record(ex: &MultimodalExample) -> Record {
    Record {
        tokens: ex.tokens.clone(),
        labels: ex.labels.iter().map(|l| l.as_str().to_string()).collect(),
        image: ImageRecord {
            h: ex.image.h,
            w: ex.image.w,
            c: ex.image.c,
            values: ex.image.values.clone(),
        },
    }
}

/// Parse JSONL text. Blank lines are skipped; errors carry the 1-based line.
pub fn parse_jsonl(text: &str) -> Result<Vec<MultimodalExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let located = |message: String| Error::DataLine { line: i + 1, message };
        let record: Record = serde_json::from_str(line).map_err(|e| located(e.to_string()))?;
        let ex = from_record(record).map_err(|e| located(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<MultimodalExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn to_jsonl(examples: &[MultimodalExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&to_record(ex)).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(path: impl AsRef<Path>, examples: &[MultimodalExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(examples)).map_err(|e| Error::io(path, e))
}
