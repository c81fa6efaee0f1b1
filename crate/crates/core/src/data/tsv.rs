use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result, TextExample};

/// Column names of a tab-separated file with a header row.
///
/// When `label_names` is set, labels are matched against it by string;
/// otherwise the label column must hold class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvSchema {
    pub label: String,
    pub text_a: String,
    #[serde(default)]
    pub text_b: Option<String>,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
}

impl Default for TsvSchema {
    fn default() -> Self {
        TsvSchema {
            label: "label".into(),
            text_a: "sentence".into(),
            text_b: None,
            label_names: None,
        }
    }
}

fn column(header: &[&str], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::Format {
            line: 1,
            detail: format!("missing column `{name}` in header"),
        })
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<Vec<TextExample>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tsv(&text, schema)
}

pub(crate) fn parse_tsv(text: &str, schema: &TsvSchema) -> Result<Vec<TextExample>> {
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.split('\t').collect(),
        None => return Err(DataError::Empty("tsv file")),
    };
    let label_col = column(&header, &schema.label)?;
    let a_col = column(&header, &schema.text_a)?;
    let b_col = schema
        .text_b
        .as_deref()
        .map(|b| column(&header, b))
        .transpose()?;

    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |col: usize, name: &str| {
            fields.get(col).copied().ok_or_else(|| DataError::Format {
                line: line_no,
                detail: format!("missing `{name}` field (expected column {})", col + 1),
            })
        };
        let raw_label = get(label_col, &schema.label)?.trim();
        let label = match &schema.label_names {
            Some(names) => names.iter().position(|n| n == raw_label),
            None => raw_label.parse().ok(),
        }
        .ok_or_else(|| DataError::Label {
            line: line_no,
            label: raw_label.to_string(),
        })?;
        let text_a = get(a_col, &schema.text_a)?.to_string();
        if text_a.trim().is_empty() {
            return Err(DataError::Format {
                line: line_no,
                detail: format!("empty `{}` field", schema.text_a),
            });
        }
        let text_b = match (b_col, &schema.text_b) {
            (Some(c), Some(name)) => Some(get(c, name)?.to_string()),
            _ => None,
        };
        out.push(TextExample {
            text_a,
            text_b,
            label,
        });
    }
    Ok(out)
}

/// Writes examples under `schema`, labels as indices or names.
pub fn write_tsv(path: &Path, schema: &TsvSchema, examples: &[TextExample]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    let mut header = vec![schema.label.as_str(), schema.text_a.as_str()];
    header.extend(schema.text_b.as_deref());
    writeln!(buf, "{}", header.join("\t")).map_err(io)?;
    for e in examples {
        let label = match &schema.label_names {
            Some(names) => names[e.label].clone(),
            None => e.label.to_string(),
        };
        let mut row = vec![label, e.text_a.clone()];
        if schema.text_b.is_some() {
            row.push(e.text_b.clone().unwrap_or_default());
        }
        writeln!(buf, "{}", row.join("\t")).map_err(io)?;
    }
    fs::write(path, buf).map_err(io)
}
