//! `manifest.json` written next to every command's outputs: what ran, with
//! which configuration, and a SHA-256 of each file produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
    /// Hash over the sorted `path:sha256` lines of `files`.
    pub content_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn content_hash(files: &[FileEntry]) -> String {
    let mut lines: Vec<String> = files.iter().map(|f| format!("{}:{}", f.path, f.sha256)).collect();
    lines.sort();
    sha256_hex(lines.join("\n").as_bytes())
}

/// Collects output files under `dir` as they are written.
pub struct OutputDir {
    pub dir: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        setseq_core::diff::write_file_atomic(&path, contents.as_ref())?;
        self.track(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file written by someone else.
    pub fn track(&mut self, name: &str) {
        let p = PathBuf::from(name);
        if !self.files.contains(&p) {
            self.files.push(p);
        }
    }

    pub fn finish<C: Serialize>(self, command: &str, config: &C) -> CliResult<RunManifest> {
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = std::fs::read(self.dir.join(rel))?;
            files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            content_hash: content_hash(&files),
            files,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        setseq_core::diff::write_file_atomic(&self.dir.join(MANIFEST_NAME), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Reads the manifest of `dir` and checks every listed file against its hash.
pub fn verify(dir: &Path) -> CliResult<RunManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|_| {
        CliError::Data(format!(
            "{} has no {MANIFEST_NAME}; refusing unverified inputs",
            dir.display()
        ))
    })?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for f in &manifest.files {
        let bytes = std::fs::read(dir.join(&f.path))
            .map_err(|e| CliError::Data(format!("{} listed in manifest: {e}", f.path)))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(CliError::Data(format!("{} does not match its manifest hash", f.path)));
        }
    }
    if content_hash(&manifest.files) != manifest.content_hash {
        return Err(CliError::Data(format!("{} content hash mismatch", path.display())));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(tmp.path().to_path_buf()).unwrap();
        out.write("a.csv", "x,y\n1,2\n").unwrap();
        out.finish("test", &serde_json::json!({})).unwrap();
        assert!(verify(tmp.path()).is_ok());
        std::fs::write(tmp.path().join("a.csv"), "x,y\n1,3\n").unwrap();
        assert!(matches!(verify(tmp.path()), Err(CliError::Data(_))));
    }
}
