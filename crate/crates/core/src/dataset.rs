//! Turns a directory of images into an extracted, manifest-described dataset.
//!
//! Input layout: images directly under the input directory (class
//! `unlabeled`) or one level down, where the subdirectory name is the class.
//! Output layout:
//!
//! ```text
//! OUT/dataset.manifest
//! OUT/images/<id>.<ext>          copied verbatim
//! OUT/activations/<id>.npy       (H, W, C) f64
//! OUT/activations/extractor.meta
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor_io::{self, DatasetManifest, ImageError, ManifestEntry, TensorIoError};
use crate::toyextract::{self, ExtractError, ExtractorConfig};

pub const DATASET_MANIFEST: &str = "dataset.manifest";
pub const EXTRACTOR_META: &str = "extractor.meta";
pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{}: {source}", path.display())]
    Extract {
        path: PathBuf,
        #[source]
        source: ExtractError,
    },
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error("two images map to id {0:?}")]
    DuplicateId(String),
    #[error("no .png or .ppm images under {}", .0.display())]
    NoImages(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut paths = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    paths.sort();
    Ok(paths)
}

/// `(class_label, image_path)` pairs in sorted order.
pub fn discover_images(images: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let mut found = Vec::new();
    for path in sorted_entries(images)? {
        if path.is_dir() {
            let class = path.file_name().unwrap().to_string_lossy().into_owned();
            for inner in sorted_entries(&path)? {
                if inner.is_file() && is_image(&inner) {
                    found.push((class.clone(), inner));
                }
            }
        } else if is_image(&path) {
            found.push((UNLABELED.to_string(), path));
        }
    }
    Ok(found)
}

/// Extracts every image under `images` into `out` and writes the manifest.
pub fn extract_directory(
    images: &Path,
    out: &Path,
    cfg: &ExtractorConfig,
) -> Result<DatasetManifest, DatasetError> {
    cfg.validate().map_err(|source| DatasetError::Extract {
        path: images.to_path_buf(),
        source,
    })?;
    let found = discover_images(images)?;
    if found.is_empty() {
        return Err(DatasetError::NoImages(images.to_path_buf()));
    }
    let images_out = out.join("images");
    let acts_out = out.join("activations");
    for dir in [&images_out, &acts_out] {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let bank = toyextract::make_filter_bank(cfg);
    let mut ids = HashSet::new();
    let mut entries = Vec::with_capacity(found.len());
    for (class_label, path) in found {
        let id = path.file_stem().unwrap().to_string_lossy().into_owned();
        if !ids.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let img = tensor_io::decode_image(&bytes).map_err(|source| DatasetError::Image {
            path: path.clone(),
            source,
        })?;
        let activation = toyextract::extract_with_bank(&img, &bank, cfg.grid_h, cfg.grid_w)
            .map_err(|source| DatasetError::Extract {
                path: path.clone(),
                source,
            })?;

        let ext = path
            .extension()
            .unwrap()
            .to_string_lossy()
            .to_ascii_lowercase();
        let image_rel = PathBuf::from("images").join(format!("{id}.{ext}"));
        let act_rel = PathBuf::from("activations").join(format!("{id}.npy"));
        let image_dst = out.join(&image_rel);
        std::fs::write(&image_dst, &bytes).map_err(io_err(&image_dst))?;
        tensor_io::write_array_file(
            &tensor_io::activation_to_array(&activation),
            &out.join(&act_rel),
        )?;
        entries.push(ManifestEntry {
            id,
            image_path: image_rel,
            activation_path: act_rel,
            class_label,
            embedding_path: None,
        });
    }

    let meta_path = acts_out.join(EXTRACTOR_META);
    std::fs::write(&meta_path, cfg.to_meta()).map_err(io_err(&meta_path))?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
    };
    let manifest_path = out.join(DATASET_MANIFEST);
    std::fs::write(&manifest_path, manifest.to_text()).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}
