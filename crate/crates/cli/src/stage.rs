//! Output staging: commands assemble every artifact in memory first, then
//! commit all of them atomically. A failed run leaves no partial outputs.

use std::path::{Path, PathBuf};

use crate::manifest::atomic_write;

#[derive(Default)]
pub struct Stage {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Stage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queue one output under a directory-relative path.
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    /// Write everything under `out_dir`; returns the relative paths written.
    pub fn commit(self, out_dir: &Path) -> std::io::Result<Vec<String>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (rel, bytes) in self.files {
            let path = out_dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            atomic_write(&path, &bytes)?;
            written.push(rel.to_string_lossy().into_owned());
        }
        Ok(written)
    }
}
