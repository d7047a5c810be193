//! Line-oriented dataset manifests.
//!
//! ```text
//! simviz-manifest v1
//! # id  image  activation  class  [embedding]
//! a   images/a.png   activations/a.npy   cats
//! ```
//!
//! Fields are separated by single tabs (shown as spaces above). Paths are relative to the manifest's directory
//! and may not escape it. The optional fifth column names a 1-D embedding file;
//! without it the embedding is pooled from the activation at index-build time.

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

use super::npy::{self, NpyError};

pub const MANIFEST_MAGIC: &str = "simviz-manifest v1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {msg}")]
    ManifestSyntax { line: usize, msg: String },
    #[error("manifest line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{id}: {what} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        id: String,
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{}: {source}", path.display())]
    Array {
        path: PathBuf,
        #[source]
        source: NpyError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub activation_path: PathBuf,
    pub class_label: String,
    pub embedding_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    /// Parses manifest text without touching the filesystem.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        match lines.next() {
            Some((_, MANIFEST_MAGIC)) => {}
            _ => {
                return Err(ManifestError::ManifestSyntax {
                    line: 1,
                    msg: format!("first line must be {MANIFEST_MAGIC:?}"),
                })
            }
        }

        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (line, text) in lines {
            if text.trim().is_empty() || text.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 4 && fields.len() != 5 {
                return Err(ManifestError::ManifestSyntax {
                    line,
                    msg: format!("expected 4 or 5 tab-separated fields, got {}", fields.len()),
                });
            }
            if let Some(i) = fields.iter().position(|f| f.is_empty()) {
                return Err(ManifestError::ManifestSyntax {
                    line,
                    msg: format!("field {} is empty", i + 1),
                });
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(ManifestError::DuplicateId { line, id });
            }
            let path = |s: &str| {
                relative_path(s).ok_or_else(|| ManifestError::ManifestSyntax {
                    line,
                    msg: format!("path {s:?} is not relative to the manifest root"),
                })
            };
            entries.push(ManifestEntry {
                image_path: path(fields[1])?,
                activation_path: path(fields[2])?,
                class_label: fields[3].to_string(),
                embedding_path: fields.get(4).map(|s| path(s)).transpose()?,
                id,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Renders the wire format. `parse(to_text())` reproduces the entries.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}",
                e.id,
                slash_path(&e.image_path),
                slash_path(&e.activation_path),
                e.class_label
            ));
            if let Some(p) = &e.embedding_path {
                out.push('\t');
                out.push_str(&slash_path(p));
            }
            out.push('\n');
        }
        out
    }

    /// Checks that every referenced file exists and that all activation
    /// headers agree on one 3-D shape. Returns that shape, if any entries exist.
    pub fn validate(&self) -> Result<Option<[usize; 3]>, ManifestError> {
        let mut expected: Option<[usize; 3]> = None;
        for e in &self.entries {
            let image = self.resolve(&e.image_path);
            if !image.is_file() {
                return Err(ManifestError::MissingFile(image));
            }
            let shape = probe_shape(&self.resolve(&e.activation_path))?;
            let shape3: [usize; 3] = match shape.as_slice() {
                &[h, w, c] => [h, w, c],
                _ => {
                    return Err(ManifestError::ShapeMismatch {
                        id: e.id.clone(),
                        what: "activation",
                        expected: expected.map_or_else(|| vec![0, 0, 0], |s| s.to_vec()),
                        found: shape,
                    })
                }
            };
            match expected {
                None => expected = Some(shape3),
                Some(s) if s != shape3 => {
                    return Err(ManifestError::ShapeMismatch {
                        id: e.id.clone(),
                        what: "activation",
                        expected: s.to_vec(),
                        found: shape3.to_vec(),
                    })
                }
                Some(_) => {}
            }
            if let Some(p) = &e.embedding_path {
                let shape = probe_shape(&self.resolve(p))?;
                if shape != [shape3[2]] {
                    return Err(ManifestError::ShapeMismatch {
                        id: e.id.clone(),
                        what: "embedding",
                        expected: vec![shape3[2]],
                        found: shape,
                    });
                }
            }
        }
        Ok(expected)
    }
}

/// Reads, parses, and eagerly validates a manifest file. Paths resolve
/// against the manifest's parent directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = DatasetManifest::parse(&text, root)?;
    manifest.validate()?;
    Ok(manifest)
}

fn probe_shape(path: &Path) -> Result<Vec<usize>, ManifestError> {
    let bytes = std::fs::read(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => ManifestError::MissingFile(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    npy::read_header(&bytes)
        .map(|h| h.shape)
        .map_err(|source| ManifestError::Array {
            path: path.to_path_buf(),
            source,
        })
}

fn relative_path(s: &str) -> Option<PathBuf> {
    let p = PathBuf::from(s);
    p.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        .then_some(p)
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}
