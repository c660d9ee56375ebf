//! Task directories: a manifest plus source and target feature files.

use std::fs;
use std::path::Path;

use pda_core::PdaTask;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::features::read_features;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    /// Hex SHA-256 of the file; checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    #[serde(default)]
    pub shared_classes: Option<Vec<usize>>,
    pub source: FileEntry,
    pub target: FileEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Load and validate a task; every problem found is listed.
pub fn load_task(dir: &Path) -> CliResult<(PdaTask, Manifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Task(vec![format!("{}: {e}", path.display())]))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Task(vec![format!("{}: {e}", path.display())]))?;
    let mut problems = Vec::new();
    let mut load =
        |entry: &FileEntry| match read_features(&dir.join(&entry.path), manifest.num_classes) {
            Ok((data, bytes)) => {
                if let Some(expected) = &entry.sha256 {
                    let actual = sha256_hex(&bytes);
                    if !actual.eq_ignore_ascii_case(expected) {
                        problems.push(format!(
                            "{}: checksum {actual} does not match manifest {expected}",
                            entry.path
                        ));
                    }
                }
                Some(data)
            }
            Err(CliError::Task(v)) => {
                problems.extend(v);
                None
            }
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        };
    let source = load(&manifest.source);
    let target = load(&manifest.target);
    let (Some(source), Some(target)) = (source, target) else {
        return Err(CliError::Task(problems));
    };
    let task = PdaTask {
        source,
        target,
        num_classes: manifest.num_classes,
        shared_classes: manifest.shared_classes.clone(),
    };
    problems.extend(task.violations());
    if !problems.is_empty() {
        return Err(CliError::Task(problems));
    }
    Ok((task, manifest))
}
