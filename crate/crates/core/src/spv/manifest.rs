//! Dataset manifest: a `dim=<d>` header, then `sample_id<TAB>label<TAB>v1,...,vd`
//! per line.
//!
//! The label column is carried as raw text. Multi-label rows join their
//! labels with `|`. Feature caches use the same layout.

use std::fmt::Write as _;
use std::path::Path;

use super::SpvError;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub label: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dim: usize,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, SpvError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| SpvError::Parse {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| SpvError::Parse {
                line: 1,
                message: format!("expected `dim=<d>` header, got {header:?}"),
            })?;

        let mut rows = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            let err = |message: String| SpvError::Parse { line, message };
            let fields: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(err("empty sample id".into()));
            }
            let features: Vec<f64> = if fields[2].is_empty() {
                Vec::new()
            } else {
                fields[2]
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(format!("bad feature value: {e}")))?
            };
            if features.len() != dim {
                return Err(err(format!("expected {dim} feature values, got {}", features.len())));
            }
            rows.push(ManifestRow {
                id: fields[0].to_string(),
                label: fields[1].to_string(),
                features,
            });
        }
        Ok(Self { dim, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for row in &self.rows {
            let _ = write!(out, "{}\t{}\t", row.id, row.label);
            for (j, v) in row.features.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                // `Display` for f64 prints the shortest string that parses back exactly.
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SpvError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
