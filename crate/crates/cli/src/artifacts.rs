//! In-memory output files. Jobs build [`Artifacts`]; one collector writes
//! them, so file contents never depend on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use embinvert_core::Image;
use serde::Serialize;

use crate::{png_io, report};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    files: BTreeMap<PathBuf, Vec<u8>>,
}

impl Artifacts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a file under a relative path; paths must be unique.
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) -> Result<()> {
        let path = path.into();
        ensure!(
            path.components().all(|c| matches!(c, Component::Normal(_))),
            "artifact path {} must be relative and plain",
            path.display()
        );
        if self.files.contains_key(&path) {
            bail!("duplicate artifact {}", path.display());
        }
        self.files.insert(path, bytes);
        Ok(())
    }

    pub fn png(&mut self, path: impl Into<PathBuf>, image: &Image) -> Result<()> {
        self.add(path, png_io::encode(image)?)
    }

    pub fn json(&mut self, path: impl Into<PathBuf>, value: &impl Serialize) -> Result<()> {
        self.add(path, report::pretty(value)?)
    }

    pub fn text(&mut self, path: impl Into<PathBuf>, text: String) -> Result<()> {
        self.add(path, text.into_bytes())
    }

    pub fn merge(&mut self, other: Artifacts) -> Result<()> {
        for (p, b) in other.files {
            self.add(p, b)?;
        }
        Ok(())
    }

    pub fn get(&self, path: impl AsRef<Path>) -> Option<&[u8]> {
        self.files.get(path.as_ref()).map(Vec::as_slice)
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.keys().map(PathBuf::as_path)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Writes every file under `root` in path order. On failure, files and
    /// directories created by this call are removed again.
    pub fn write_all(&self, root: &Path) -> Result<()> {
        let mut created_dirs = Vec::new();
        let mut written = Vec::new();
        let result = self.write_tracked(root, &mut created_dirs, &mut written);
        if result.is_err() {
            for f in written.iter().rev() {
                let _ = fs::remove_file(f);
            }
            for d in created_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
        }
        result
    }

    fn write_tracked(&self, root: &Path, dirs: &mut Vec<PathBuf>, written: &mut Vec<PathBuf>) -> Result<()> {
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                create_dirs(parent, dirs)?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(())
    }
}

/// `create_dir_all` that records every directory it had to create.
fn create_dirs(dir: &Path, created: &mut Vec<PathBuf>) -> Result<()> {
    if dir.as_os_str().is_empty() || dir.is_dir() {
        return Ok(());
    }
    if let Some(parent) = dir.parent() {
        create_dirs(parent, created)?;
    }
    fs::create_dir(dir).with_context(|| format!("creating {}", dir.display()))?;
    created.push(dir.to_path_buf());
    Ok(())
}
