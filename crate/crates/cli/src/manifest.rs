//! Newline-delimited manifests of whitespace-separated paths. Blank lines and lines starting
//! with `#` are skipped; relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use facecorr::{Error, Result};

pub fn read_manifest(path: &Path, fields: usize) -> Result<Vec<Vec<PathBuf>>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")), fields)
}

pub fn parse_manifest(text: &str, base: &Path, fields: usize) -> Result<Vec<Vec<PathBuf>>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != fields {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {fields} paths, found {}", parts.len()),
            });
        }
        let record = parts
            .iter()
            .map(|p| {
                let p = Path::new(p);
                let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                if !full.exists() {
                    return Err(Error::File {
                        path: full,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    });
                }
                Ok(full)
            })
            .collect::<Result<_>>()?;
        records.push(record);
    }
    Ok(records)
}
