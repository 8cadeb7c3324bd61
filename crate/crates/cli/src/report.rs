//! JSON report writing and input fingerprints.
//!
//! Reports never embed absolute paths: inputs are identified by a SHA-256
//! of their contents, so reruns in different directories produce the same
//! bytes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use loce::store::Container;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

/// Digest over the given files, each prefixed by its length so that file
/// boundaries are part of the hash.
pub fn digest_files(paths: &[PathBuf]) -> CliResult<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = read(p)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Manifest plus every array it references.
pub fn container_digest(c: &Container) -> CliResult<String> {
    let mut files = vec![c.root().join("manifest.json")];
    let mut seen = BTreeSet::new();
    for r in c.records() {
        for rel in [&r.activation_path, &r.mask_path] {
            if seen.insert(rel.clone()) {
                files.push(c.root().join(rel));
            }
        }
    }
    digest_files(&files)
}

pub fn bank_digest(dir: &Path) -> CliResult<String> {
    digest_files(&["manifest.json", "records.jsonl", "loces.npy"].map(|f| dir.join(f)))
}

/// Common header of every report.
pub fn envelope(schema: &str, cfg: &RunConfig, inputs: Value) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema".into(), json!(schema));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("inputs".into(), inputs);
    m
}

pub fn to_pretty(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report values serialize") + "\n"
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_text(path, &to_pretty(value))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

/// Population mean and standard deviation; `(0, 0)` for no values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_content_and_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&a, "xy").unwrap();
        fs::write(&b, "z").unwrap();
        let d1 = digest_files(&[a.clone(), b.clone()]).unwrap();
        fs::write(&a, "x").unwrap();
        fs::write(&b, "yz").unwrap();
        assert_ne!(d1, digest_files(&[a.clone(), b.clone()]).unwrap());
        assert!(matches!(digest_files(&[dir.path().join("none")]), Err(CliError::Data(_))));
    }

    #[test]
    fn mean_std_is_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
