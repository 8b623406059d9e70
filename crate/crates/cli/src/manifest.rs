//! Manifests: one `path<TAB>label` entry per line, UTF-8. The label may be
//! omitted for extraction. Blank lines and lines starting with `#` are
//! skipped; relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
    /// 1-based line in the manifest file.
    pub line: usize,
}

pub fn parse_manifest(text: &str, base: &Path) -> CliResult<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let path = fields.next().unwrap_or("").trim();
        let label = match fields.next().map(str::trim) {
            None | Some("") => None,
            Some(l) => Some(l.parse().map_err(|_| CliError::usage(format!("manifest line {}: bad label {l:?}", i + 1)))?),
        };
        if fields.next().is_some() {
            return Err(CliError::usage(format!("manifest line {}: expected `path<TAB>label`", i + 1)));
        }
        let p = Path::new(path);
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        entries.push(ManifestEntry { path, label, line: i + 1 });
    }
    if entries.is_empty() {
        return Err(CliError::usage("empty manifest"));
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Entries with labels, checked against the class count.
pub fn labelled(entries: &[ManifestEntry], classes: usize) -> CliResult<Vec<(PathBuf, usize)>> {
    entries
        .iter()
        .map(|e| match e.label {
            Some(l) if l < classes => Ok((e.path.clone(), l)),
            Some(l) => Err(CliError::usage(format!("manifest line {}: label {l} outside 0..{classes}", e.line))),
            None => Err(CliError::usage(format!("manifest line {}: missing label", e.line))),
        })
        .collect()
}

/// Render entries with paths relative to the manifest directory.
pub fn format_manifest(rows: &[(String, usize)]) -> String {
    let mut s = String::new();
    for (p, l) in rows {
        let _ = writeln!(s, "{p}\t{l}");
    }
    s
}
