//! On-disk formats: npy arrays, dataset manifests, and raster images.

mod image;
mod manifest;
pub mod npy;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use self::image::{
    decode_image, encode_png, encode_ppm, read_image, write_image, ImageError, RasterImage,
};
pub use self::manifest::{
    load_manifest, DatasetManifest, ManifestEntry, ManifestError, MANIFEST_MAGIC,
};
pub use self::npy::{read_array, write_array, ArrayData, ArrayFile, Dtype, NpyError};

use crate::simcore::{
    ActivationTensor, Direction, PooledEmbedding, PoolingMode, SimError, SimilarityMap,
};

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Array {
        path: PathBuf,
        #[source]
        source: NpyError,
    },
    #[error("{}: expected a {expected} array, found shape {found:?}", path.display())]
    WrongRank {
        path: PathBuf,
        expected: &'static str,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub fn read_array_file(path: &Path) -> Result<ArrayFile, TensorIoError> {
    let bytes = std::fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_array(&bytes).map_err(|source| TensorIoError::Array {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_array_file(a: &ArrayFile, path: &Path) -> Result<(), TensorIoError> {
    std::fs::write(path, write_array(a)).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Interprets a 3-D `(H, W, C)` array as activations.
pub fn activation_from_array(a: &ArrayFile) -> Result<ActivationTensor, SimError> {
    match *a.shape() {
        [h, w, c] => ActivationTensor::new(h, w, c, a.to_f64_vec()),
        _ => Err(SimError::InvalidTensor(format!(
            "activation must be 3-D, got shape {:?}",
            a.shape()
        ))),
    }
}

pub fn activation_to_array(t: &ActivationTensor) -> ArrayFile {
    ArrayFile::from_f64(
        vec![t.grid_h(), t.grid_w(), t.channels()],
        t.values().to_vec(),
    )
    .expect("activation tensors satisfy array invariants")
}

pub fn read_activation(path: &Path) -> Result<ActivationTensor, TensorIoError> {
    let a = read_array_file(path)?;
    if a.shape().len() != 3 {
        return Err(TensorIoError::WrongRank {
            path: path.to_path_buf(),
            expected: "3-D",
            found: a.shape().to_vec(),
        });
    }
    Ok(activation_from_array(&a)?)
}

/// Reads a 1-D embedding file, tagging it with the pooling it came from.
pub fn read_embedding(
    path: &Path,
    mode: PoolingMode,
    source_grid: (usize, usize),
) -> Result<PooledEmbedding, TensorIoError> {
    let a = read_array_file(path)?;
    if a.shape().len() != 1 {
        return Err(TensorIoError::WrongRank {
            path: path.to_path_buf(),
            expected: "1-D",
            found: a.shape().to_vec(),
        });
    }
    Ok(PooledEmbedding::new(a.to_f64_vec(), mode, source_grid)?)
}

/// A map serializes as a `(H, W, 1)` f64 array.
pub fn map_to_array(m: &SimilarityMap) -> ArrayFile {
    ArrayFile::from_f64(vec![m.grid_h(), m.grid_w(), 1], m.cells().to_vec())
        .expect("similarity maps satisfy array invariants")
}

pub fn map_from_array(
    a: &ArrayFile,
    mode: PoolingMode,
    direction: Direction,
) -> Result<SimilarityMap, SimError> {
    match *a.shape() {
        [h, w, 1] => SimilarityMap::from_cells(h, w, a.to_f64_vec(), mode, direction),
        _ => Err(SimError::InvalidTensor(format!(
            "similarity map must have shape (H, W, 1), got {:?}",
            a.shape()
        ))),
    }
}
