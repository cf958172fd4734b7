//! Dataset manifest: a line-based listing of (image path, class id,
//! split). The loader enforces the base/novel discipline — train and
//! test class-id sets must be disjoint — and that every referenced file
//! exists.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// image path relative to the manifest root
    pub path: String,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validate and wrap a set of entries. Rejects any class id shared
    /// between the train and test splits.
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        let collect = |s: Split| -> BTreeSet<usize> {
            entries.iter().filter(|e| e.split == s).map(|e| e.class_id).collect()
        };
        let train = collect(Split::Train);
        let test = collect(Split::Test);
        if let Some(shared) = train.intersection(&test).next() {
            return Err(Error::Data(format!(
                "manifest: class {shared} appears in both train and test splits"
            )));
        }
        Ok(DatasetManifest { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Parse `path,class_id,split` lines (`#` comments and blank lines
    /// allowed) and verify every referenced file exists under `root`.
    pub fn load(manifest_path: &Path, root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Data(format!(
                    "{}:{}: expected `path,class_id,split`",
                    manifest_path.display(),
                    lineno + 1
                )));
            }
            let class_id = parts[1].parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: bad class id {:?}",
                    manifest_path.display(),
                    lineno + 1,
                    parts[1]
                ))
            })?;
            let entry =
                ManifestEntry { path: parts[0].to_string(), class_id, split: Split::parse(parts[2])? };
            let resolved = root.join(&entry.path);
            if !resolved.is_file() {
                return Err(Error::Data(format!(
                    "{}:{}: missing file {}",
                    manifest_path.display(),
                    lineno + 1,
                    resolved.display()
                )));
            }
            entries.push(entry);
        }
        DatasetManifest::new(root.to_path_buf(), entries)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let mut text = String::from("# path,class_id,split\n");
        for e in &self.entries {
            text.push_str(&format!("{},{},{}\n", e.path, e.class_id, e.split.as_str()));
        }
        std::fs::write(manifest_path, text)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))
    }
}
