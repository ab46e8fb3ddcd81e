//! Run manifests: what was run, on which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use viewdvc::data::{read_json, write_json};
use viewdvc::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Content hash of every input file.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Content hash of every output file, relative to `out`.
    pub outputs: BTreeMap<PathBuf, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

/// Git-style blob hash, with SHA-256: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// Every regular file under `root` (or `root` itself), sorted.
fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Err(Error::io(root, std::io::ErrorKind::NotFound.into()));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Runtime(format!("{}: {e}", root.display())))?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Hashes of all files under the given input paths, keyed by path.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<PathBuf, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for f in files_under(p)? {
            let h = hash_file(&f)?;
            out.insert(f, h);
        }
    }
    Ok(out)
}

/// Hashes of the files under `out`, keyed relative to it, without the
/// manifest itself.
pub fn hash_outputs(out: &Path) -> Result<BTreeMap<PathBuf, String>> {
    let mut hashes = BTreeMap::new();
    for f in files_under(out)? {
        let rel = f.strip_prefix(out).expect("walked from out").to_path_buf();
        if rel == Path::new(MANIFEST_NAME) {
            continue;
        }
        hashes.insert(rel, hash_file(&f)?);
    }
    Ok(hashes)
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_NAME)
    }

    pub fn write(&self) -> Result<()> {
        write_json(&Self::path(&self.out), self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// `argv` with the value of `--out` replaced.
pub fn replace_out(argv: &[String], out: &Path) -> Result<Vec<String>> {
    let mut result = Vec::with_capacity(argv.len());
    let mut replaced = false;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            result.push(a.clone());
            result.push(out.display().to_string());
            replaced = true;
        } else if a.starts_with("--out=") {
            result.push(format!("--out={}", out.display()));
            replaced = true;
        } else {
            result.push(a.clone());
        }
    }
    if !replaced {
        return Err(Error::Validation("manifest argv has no --out argument".into()));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_construction() {
        // sha256 of "blob 5\0hello", computed independently.
        let mut h = Sha256::new();
        h.update(b"blob 5\x00hello");
        assert_eq!(blob_hash(b"hello"), format!("{:x}", h.finalize()));
        assert_ne!(blob_hash(b"hello"), blob_hash(b"hello "));
    }

    #[test]
    fn out_argument_is_replaced_in_both_forms() {
        let argv: Vec<String> = ["evaluate", "--out", "a", "--pred", "p"].map(String::from).to_vec();
        assert_eq!(replace_out(&argv, Path::new("b")).unwrap(), ["evaluate", "--out", "b", "--pred", "p"]);
        let argv: Vec<String> = ["evaluate", "--out=a"].map(String::from).to_vec();
        assert_eq!(replace_out(&argv, Path::new("b")).unwrap(), ["evaluate", "--out=b"]);
        assert!(replace_out(&["x".to_string()], Path::new("b")).is_err());
    }

    #[test]
    fn outputs_skip_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        std::fs::write(dir.path().join(MANIFEST_NAME), "{}").unwrap();
        let h = hash_outputs(dir.path()).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[Path::new("sub/a.txt")], blob_hash(b"a"));
    }
}
