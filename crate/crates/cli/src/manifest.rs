//! Run manifests: every command records what it read, what it wrote, and the
//! exact configuration, so a run can be audited or reproduced later.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use flowsteer::error::{Error, Result};

/// Written as `manifest.json` under the output directory, after all other
/// outputs, so its presence marks a completed run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Input path -> sha256 of its content (directories hash their file tree).
    pub inputs: BTreeMap<String, String>,
    /// Paths written, relative to the output directory.
    pub outputs: Vec<String>,
    pub timing_ms: u64,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Content hash of a file, or of a directory as the hash of its sorted
/// (relative path, file hash) pairs. Independent of mtime and inode order.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path)
        .map_err(|e| Error::data(format!("cannot stat {}: {e}", path.display())))?;
    if meta.is_file() {
        return hash_file(path);
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut hasher = Sha256::new();
    for rel in &entries {
        let digest = hash_file(&path.join(rel))?;
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(digest.as_bytes());
        hasher.update([b'\n']);
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let iter = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in iter {
        let entry = entry.map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(root)
                .map_err(|_| Error::data("path escapes its root"))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Accumulates manifest fields while a command runs, then writes the file.
pub struct ManifestBuilder {
    manifest: Manifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &[(&'static str, String)], seed: u64) -> Self {
        ManifestBuilder {
            manifest: Manifest {
                command: command.to_string(),
                config: config.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
                seed,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                timing_ms: 0,
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .inputs
            .insert(path.display().to_string(), hash_path(path)?);
        Ok(())
    }

    pub fn output(&mut self, rel: &str) {
        self.manifest.outputs.push(rel.to_string());
    }

    /// Writes `manifest.json` last; the timing field is the one
    /// run-dependent value in the file.
    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.manifest.timing_ms = self.started.elapsed().as_millis() as u64;
        self.manifest.outputs.push("manifest.json".to_string());
        let body = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::format(format!("manifest serialization failed: {e}")))?;
        fs::write(out_dir.join("manifest.json"), body + "\n")
            .map_err(|e| Error::data(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_ignores_creation_order_but_not_content() {
        let a = tempfile::tempdir().unwrap();
        fs::create_dir(a.path().join("sub")).unwrap();
        fs::write(a.path().join("sub/y.txt"), "two").unwrap();
        fs::write(a.path().join("x.txt"), "one").unwrap();

        let b = tempfile::tempdir().unwrap();
        fs::write(b.path().join("x.txt"), "one").unwrap();
        fs::create_dir(b.path().join("sub")).unwrap();
        fs::write(b.path().join("sub/y.txt"), "two").unwrap();

        assert_eq!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());

        fs::write(b.path().join("x.txt"), "ONE").unwrap();
        assert_ne!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
    }

    #[test]
    fn file_hash_matches_a_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            hash_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lands_last_with_itself_in_the_output_list() {
        let dir = tempfile::tempdir().unwrap();
        let mut mb = ManifestBuilder::new("synth", &[("steps", "3".into())], 7);
        mb.output("a.csv");
        mb.finish(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "synth");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["config"]["steps"], "3");
        assert_eq!(v["outputs"][0], "a.csv");
        assert_eq!(v["outputs"][1], "manifest.json");
    }
}
