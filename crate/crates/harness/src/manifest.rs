//! Stage manifests, completion markers and file helpers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{ErrorRecord, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DONE: &str = "DONE";
pub const FAILED: &str = "FAILED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub status: Status,
    /// Hash of the configuration slice this stage (and its upstream) consumed.
    pub config_hash: String,
    /// Hash of the whole resolved run configuration.
    pub run_config_hash: String,
    pub seed: u64,
    pub harness_version: String,
    pub core_version: String,
    /// Upstream stage name to its config hash.
    pub upstream: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
    pub error: Option<ErrorRecord>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }
}

/// True when `dir` holds a manifest marked complete and a DONE marker.
pub fn is_complete(dir: &Path) -> bool {
    dir.join(DONE).is_file()
        && Manifest::read(dir)
            .map(|m| m.status == Status::Complete)
            .unwrap_or(false)
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Every file under `dir` except the manifest and markers, sorted by
/// relative path.
pub fn list_files(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut paths = Vec::new();
    collect(dir, dir, &mut paths)?;
    paths.sort();
    paths
        .into_iter()
        .filter(|(rel, _)| ![MANIFEST, DONE, FAILED].contains(&rel.as_str()))
        .map(|(name, path)| {
            Ok(FileEntry {
                bytes: fs::metadata(&path)?.len(),
                sha256: file_sha256(&path)?,
                name,
            })
        })
        .collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("child of root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// Writes a table of per-row string maps sharing `header` as CSV.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_table`] into header and rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, csv::Error>>()?;
    Ok((header, rows))
}

pub(crate) fn write_marker(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
