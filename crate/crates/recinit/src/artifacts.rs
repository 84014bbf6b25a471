//! Output directory with content-addressed artifact names:
//! `<label>-<first 12 hex of sha256>.<ext>`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HASH_LEN: usize = 12;

pub fn sha256_hex(bytes: &[u8]) -> String {
    recinit_core::params::hex(&Sha256::digest(bytes))
}

/// Short content hash used in file names and lineage fields.
pub fn short_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..HASH_LEN].to_string()
}

fn check_label(label: &str) -> Result<()> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!("artifact label {label:?} must be ASCII letters, digits, '-', '_' or '.'")))
    }
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub path: PathBuf,
    pub hash: String,
}

impl Artifact {
    pub fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Collects what a command writes so it can list them at the end.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` as `<label>-<hash>.<ext>`, replacing any previous copy.
    pub fn write(&mut self, label: &str, ext: &str, bytes: &[u8]) -> Result<Artifact> {
        check_label(label)?;
        let hash = short_hash(bytes);
        let path = self.root.join(format!("{label}-{hash}.{ext}"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        log::info!("wrote {}", path.display());
        let a = Artifact { path, hash };
        self.written.push(a.clone());
        Ok(a)
    }

    pub fn written(&self) -> &[Artifact] {
        &self.written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(dir.path()).unwrap();
        let a = out.write("report", "txt", b"abc").unwrap();
        // sha256("abc") starts ba7816bf8f01
        assert_eq!(a.file_name(), "report-ba7816bf8f01.txt");
        let b = out.write("report", "txt", b"abc").unwrap();
        assert_eq!(a.path, b.path);
        assert!(out.write("bad label", "txt", b"x").is_err());
    }
}
