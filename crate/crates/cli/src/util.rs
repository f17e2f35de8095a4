//! Artifact plumbing shared by the subcommands: atomic file writes, the
//! predictions text format, truth-label conversion, and config-hash checks.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gsecnet_core::pillars::PointLabel;

use crate::config::LabelsSection;
use crate::CliError;

/// Writes `bytes` to `path` via a same-directory temp file and atomic
/// rename, so a crash never leaves a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(&e))?;
    tmp.write_all(bytes).map_err(|e| io_err(&e))?;
    tmp.persist(path).map_err(|e| io_err(&e))?;
    Ok(())
}

/// Runs a path-taking writer against a temp path, then renames into place.
/// Adapts writers that insist on opening the file themselves.
pub fn write_via<E: std::fmt::Display>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    let tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| io_err(&e))?
        .into_temp_path();
    write(&tmp).map_err(|e| io_err(&e))?;
    tmp.persist(path).map_err(|e| io_err(&e))?;
    Ok(())
}

/// Prediction label column: 1 ground, 0 non-ground, -1 unscored.
fn label_code(label: PointLabel) -> i8 {
    match label {
        PointLabel::Ground => 1,
        PointLabel::NonGround => 0,
        PointLabel::Unscored => -1,
    }
}

/// Renders the predictions text: a config-hash header, then one
/// `index label probability` line per point.
pub fn render_predictions(config_hash: u64, rows: &[(PointLabel, f64)]) -> String {
    let mut out = format!("# config_hash {config_hash:016x}\n");
    for (i, (label, prob)) in rows.iter().enumerate() {
        writeln!(out, "{i} {} {prob:.6}", label_code(*label)).expect("string write");
    }
    out
}

/// A parsed predictions file.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub config_hash: Option<u64>,
    pub labels: Vec<PointLabel>,
    pub probs: Vec<f64>,
}

/// Parses a predictions file. Indices must be 0..n in order; the header is
/// optional so hand-written truth files also load.
pub fn read_predictions(path: &Path) -> Result<Predictions, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, why: &str| {
        CliError::Data(format!("{}:{line}: {why}", path.display()))
    };
    let mut config_hash = None;
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            if parts.next() == Some("config_hash") {
                let hex = parts.next().ok_or_else(|| bad(n + 1, "missing hash value"))?;
                config_hash = Some(
                    u64::from_str_radix(hex, 16)
                        .map_err(|_| bad(n + 1, "malformed hash value"))?,
                );
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let index: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n + 1, "malformed index"))?;
        if index != labels.len() {
            return Err(bad(n + 1, "indices must run 0..n in order"));
        }
        let label = match parts.next() {
            Some("1") => PointLabel::Ground,
            Some("0") => PointLabel::NonGround,
            Some("-1") => PointLabel::Unscored,
            _ => return Err(bad(n + 1, "label must be 1, 0, or -1")),
        };
        let prob: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n + 1, "malformed probability"))?;
        if parts.next().is_some() {
            return Err(bad(n + 1, "expected `index label probability`"));
        }
        labels.push(label);
        probs.push(prob);
    }
    if labels.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no prediction lines",
            path.display()
        )));
    }
    Ok(Predictions {
        config_hash,
        labels,
        probs,
    })
}

/// Maps semantic classes to scoring truth: configured ground classes become
/// ground, class 0 (unlabeled) is unscored, everything else is non-ground.
pub fn classes_to_truth(classes: &[u16], labels: &LabelsSection) -> Vec<PointLabel> {
    classes
        .iter()
        .map(|&c| {
            if c == 0 {
                PointLabel::Unscored
            } else if labels.ground_classes.contains(&c) {
                PointLabel::Ground
            } else {
                PointLabel::NonGround
            }
        })
        .collect()
}

/// Files under `dir` with the given extension, sorted by name so frame order
/// is stable regardless of directory iteration order.
pub fn list_ext_sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no .{ext} files",
            dir.display()
        )));
    }
    Ok(files)
}

/// Enforces the artifact-consistency invariant: differing config hashes are
/// a conflict unless `--force` waives it.
pub fn hash_check(what: &str, found: u64, expected: u64, force: bool) -> Result<(), CliError> {
    if found == expected {
        return Ok(());
    }
    if force {
        eprintln!(
            "warning: {what}: config hash {found:016x} does not match {expected:016x} (forced)"
        );
        return Ok(());
    }
    Err(CliError::Conflict(format!(
        "{what}: config hash {found:016x} does not match {expected:016x}; pass --force to proceed"
    )))
}
