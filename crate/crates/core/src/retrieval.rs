//! Exhaustive embedding index with whole-image and region-restricted ranking.
//!
//! Results are ordered by descending score, ties broken by ascending id, so
//! every query has exactly one correct answer.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::simcore::{
    self, ActivationTensor, Direction, PooledEmbedding, PoolingMode, Region, SimError,
    SimilarityMap,
};
use crate::tensor_io::{self, ArrayFile, DatasetManifest, ManifestError, TensorIoError};
use crate::toyextract::parse_grid;

pub const INDEX_MANIFEST: &str = "index.manifest";
pub const INDEX_EMBEDDINGS: &str = "embeddings.npy";
pub const INDEX_META: &str = "index.meta";
const INDEX_FORMAT: &str = "simviz-index v1";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("zero-norm embeddings for ids: {}", .0.join(", "))]
    ZeroNormEmbedding(Vec<String>),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("number of classes to group must be at least 1")]
    InvalidGroupCount,
    #[error("{id}: activation shape {found:?} differs from index shape {expected:?}")]
    ShapeMismatch {
        id: String,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("index format: {0}")]
    IndexFormat(String),
    #[error("{id}: {source}")]
    Record {
        id: String,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub id: String,
    pub class_label: String,
    pub embedding: PooledEmbedding,
    pub activation: ActivationTensor,
    pub activation_ref: PathBuf,
    pub image_ref: PathBuf,
}

/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    records: Vec<IndexRecord>,
    by_id: HashMap<String, usize>,
    pooling_mode: PoolingMode,
    grid: (usize, usize),
    channels: usize,
    manifest: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub rank: usize,
    pub id: String,
    pub class_label: String,
    pub score: f64,
}

impl fmt::Display for RankedResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.9}",
            self.rank, self.id, self.class_label, self.score
        )
    }
}

/// Loads every activation named by `manifest` and pools it with `mode`, or
/// reads the entry's embedding file when one is given.
pub fn build_index(
    manifest: &DatasetManifest,
    mode: PoolingMode,
) -> Result<EmbeddingIndex, RetrievalError> {
    let mut records = Vec::with_capacity(manifest.entries.len());
    let mut shape: Option<[usize; 3]> = None;
    for entry in &manifest.entries {
        let activation_ref = manifest.resolve(&entry.activation_path);
        let activation = tensor_io::read_activation(&activation_ref)?;
        let found = [
            activation.grid_h(),
            activation.grid_w(),
            activation.channels(),
        ];
        match shape {
            None => shape = Some(found),
            Some(expected) if expected != found => {
                return Err(RetrievalError::ShapeMismatch {
                    id: entry.id.clone(),
                    expected,
                    found,
                })
            }
            Some(_) => {}
        }
        let embedding = match &entry.embedding_path {
            None => simcore::pool(&activation, mode),
            Some(p) => {
                let grid = (activation.grid_h(), activation.grid_w());
                tensor_io::read_embedding(&manifest.resolve(p), mode, grid)?
            }
        };
        records.push(IndexRecord {
            id: entry.id.clone(),
            class_label: entry.class_label.clone(),
            embedding,
            activation,
            activation_ref,
            image_ref: manifest.resolve(&entry.image_path),
        });
    }
    EmbeddingIndex::from_records(records, mode, manifest.clone())
}

impl EmbeddingIndex {
    fn from_records(
        records: Vec<IndexRecord>,
        pooling_mode: PoolingMode,
        manifest: DatasetManifest,
    ) -> Result<Self, RetrievalError> {
        let zero: Vec<String> = records
            .iter()
            .filter(|r| r.embedding.norm() == 0.0)
            .map(|r| r.id.clone())
            .collect();
        if !zero.is_empty() {
            return Err(RetrievalError::ZeroNormEmbedding(zero));
        }
        for r in &records {
            // embeddings supplied from files must still be the pooled activation
            simcore::decompose(&r.activation, &r.embedding, &r.embedding, pooling_mode).map_err(
                |source| RetrievalError::Record {
                    id: r.id.clone(),
                    source,
                },
            )?;
        }
        let (grid, channels) = records.first().map_or(((0, 0), 0), |r| {
            (
                (r.activation.grid_h(), r.activation.grid_w()),
                r.activation.channels(),
            )
        });
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Self {
            records,
            by_id,
            pooling_mode,
            grid,
            channels,
            manifest,
        })
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pooling_mode(&self) -> PoolingMode {
        self.pooling_mode
    }

    /// `(0, 0)` for an empty index.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn record(&self, id: &str) -> Result<&IndexRecord, RetrievalError> {
        self.by_id
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| RetrievalError::UnknownId(id.to_string()))
    }

    /// Map over `over`'s grid for the pair `(over, other)`.
    pub fn pair_map(&self, over: &str, other: &str) -> Result<SimilarityMap, RetrievalError> {
        let a = self.record(over)?;
        let b = self.record(other)?;
        Ok(simcore::decompose(
            &a.activation,
            &a.embedding,
            &b.embedding,
            self.pooling_mode,
        )?)
    }

    /// Both maps of the pair `(i, j)` under `mode`: over `i`'s grid, then over
    /// `j`'s. When `mode` differs from the index mode both embeddings are
    /// re-pooled from their activations.
    pub fn pair_maps(
        &self,
        i: &str,
        j: &str,
        mode: PoolingMode,
    ) -> Result<(SimilarityMap, SimilarityMap), RetrievalError> {
        let a = self.record(i)?;
        let b = self.record(j)?;
        let (ea, eb) = if mode == self.pooling_mode {
            (a.embedding.clone(), b.embedding.clone())
        } else {
            (
                simcore::pool(&a.activation, mode),
                simcore::pool(&b.activation, mode),
            )
        };
        let forward = simcore::decompose(&a.activation, &ea, &eb, mode)?;
        let reverse =
            simcore::decompose(&b.activation, &eb, &ea, mode)?.with_direction(Direction::Reverse);
        Ok((forward, reverse))
    }

    pub fn similarity(&self, i: &str, j: &str) -> Result<f64, RetrievalError> {
        Ok(simcore::cosine_similarity(
            &self.record(i)?.embedding,
            &self.record(j)?.embedding,
        )?)
    }

    /// Other records sharing `id`'s class, in index order.
    pub fn class_members(&self, id: &str) -> Result<Vec<&IndexRecord>, RetrievalError> {
        let q = self.record(id)?;
        Ok(self
            .records
            .iter()
            .filter(|r| r.class_label == q.class_label && r.id != q.id)
            .collect())
    }

    /// Sum of the query's pairwise maps against its same-class peers.
    pub fn class_map(&self, id: &str) -> Result<SimilarityMap, RetrievalError> {
        let q = self.record(id)?;
        let members: Vec<&PooledEmbedding> = self
            .class_members(id)?
            .iter()
            .map(|r| &r.embedding)
            .collect();
        Ok(simcore::class_map(
            &q.activation,
            &q.embedding,
            &members,
            self.pooling_mode,
        )?)
    }

    /// Writes `index.manifest`, `index.meta`, and `embeddings.npy` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        let io = |path: PathBuf| move |source| RetrievalError::Io { path, source };
        std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let root =
            std::fs::canonicalize(&self.manifest.root).map_err(io(self.manifest.root.clone()))?;
        let root = root.to_str().ok_or_else(|| {
            RetrievalError::IndexFormat(format!("root {} is not UTF-8", root.display()))
        })?;

        let manifest_path = dir.join(INDEX_MANIFEST);
        std::fs::write(&manifest_path, self.manifest.to_text())
            .map_err(io(manifest_path.clone()))?;

        let meta = format!(
            "format={INDEX_FORMAT}\nn={}\nc={}\ngrid={}x{}\npooling_mode={}\nroot={root}\n",
            self.records.len(),
            self.channels,
            self.grid.0,
            self.grid.1,
            self.pooling_mode
        );
        let meta_path = dir.join(INDEX_META);
        std::fs::write(&meta_path, meta).map_err(io(meta_path.clone()))?;

        let emb_path = dir.join(INDEX_EMBEDDINGS);
        if self.records.is_empty() {
            // a zero-length array is not a valid ArrayFile
            if emb_path.exists() {
                std::fs::remove_file(&emb_path).map_err(io(emb_path.clone()))?;
            }
            return Ok(());
        }
        let flat: Vec<f64> = self
            .records
            .iter()
            .flat_map(|r| r.embedding.components().iter().copied())
            .collect();
        let array = ArrayFile::from_f64(vec![flat.len()], flat)
            .map_err(|e| RetrievalError::IndexFormat(e.to_string()))?;
        tensor_io::write_array_file(&array, &emb_path)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| RetrievalError::Io { path, source })
        };
        let meta = IndexMeta::parse(&read(INDEX_META)?)?;
        let manifest = DatasetManifest::parse(&read(INDEX_MANIFEST)?, &meta.root)?;
        manifest.validate()?;
        if manifest.entries.len() != meta.n {
            return Err(RetrievalError::IndexFormat(format!(
                "index.meta says n={}, manifest has {} entries",
                meta.n,
                manifest.entries.len()
            )));
        }
        let embeddings = if meta.n == 0 {
            Vec::new()
        } else {
            let a = tensor_io::read_array_file(&dir.join(INDEX_EMBEDDINGS))?;
            if a.shape() != [meta.n * meta.c] {
                return Err(RetrievalError::IndexFormat(format!(
                    "embeddings.npy has shape {:?}, expected [{}]",
                    a.shape(),
                    meta.n * meta.c
                )));
            }
            a.to_f64_vec()
        };

        let mut records = Vec::with_capacity(meta.n);
        for (k, entry) in manifest.entries.iter().enumerate() {
            let activation_ref = manifest.resolve(&entry.activation_path);
            let activation = tensor_io::read_activation(&activation_ref)?;
            let found = [
                activation.grid_h(),
                activation.grid_w(),
                activation.channels(),
            ];
            let expected = [meta.grid.0, meta.grid.1, meta.c];
            if found != expected {
                return Err(RetrievalError::ShapeMismatch {
                    id: entry.id.clone(),
                    expected,
                    found,
                });
            }
            let components = embeddings[k * meta.c..(k + 1) * meta.c].to_vec();
            records.push(IndexRecord {
                id: entry.id.clone(),
                class_label: entry.class_label.clone(),
                embedding: PooledEmbedding::new(components, meta.mode, meta.grid)?,
                activation,
                activation_ref,
                image_ref: manifest.resolve(&entry.image_path),
            });
        }
        Self::from_records(records, meta.mode, manifest)
    }
}

struct IndexMeta {
    n: usize,
    c: usize,
    grid: (usize, usize),
    mode: PoolingMode,
    root: PathBuf,
}

impl IndexMeta {
    fn parse(text: &str) -> Result<Self, RetrievalError> {
        let bad = |msg: String| RetrievalError::IndexFormat(msg);
        let mut kv = HashMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(format!("index.meta lacks {k}")))
        };
        if get("format")? != INDEX_FORMAT {
            return Err(bad(format!(
                "unsupported index format {:?}",
                get("format")?
            )));
        }
        let int = |k: &str| {
            get(k)?
                .parse::<usize>()
                .map_err(|e| bad(format!("{k}: {e}")))
        };
        Ok(Self {
            n: int("n")?,
            c: int("c")?,
            grid: parse_grid(get("grid")?).map_err(bad)?,
            mode: get("pooling_mode")?.parse().map_err(bad)?,
            root: PathBuf::from(get("root")?),
        })
    }
}

fn by_score_then_id(a: &RankedResult, b: &RankedResult) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Sorts, truncates to `k`, and assigns 1-based ranks.
fn rank(mut results: Vec<RankedResult>, k: usize) -> Vec<RankedResult> {
    results.sort_by(by_score_then_id);
    results.truncate(k);
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

fn score_candidates<F>(
    index: &EmbeddingIndex,
    query_id: &str,
    k: usize,
    mut score: F,
) -> Result<Vec<RankedResult>, RetrievalError>
where
    F: FnMut(&IndexRecord, &IndexRecord) -> Result<f64, RetrievalError>,
{
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let query = index.record(query_id)?;
    let results = index
        .records
        .iter()
        .filter(|r| r.id != query.id)
        .map(|r| {
            Ok(RankedResult {
                rank: 0,
                id: r.id.clone(),
                class_label: r.class_label.clone(),
                score: score(query, r)?,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    Ok(rank(results, k))
}

/// Top-`k` records by cosine similarity to the query, excluding the query.
pub fn search(
    index: &EmbeddingIndex,
    query_id: &str,
    k: usize,
) -> Result<Vec<RankedResult>, RetrievalError> {
    score_candidates(index, query_id, k, |q, r| {
        Ok(simcore::cosine_similarity(&q.embedding, &r.embedding)?)
    })
}

/// Top-`k` records by the mass of the query-side similarity map inside `region`.
pub fn region_search(
    index: &EmbeddingIndex,
    query_id: &str,
    region: &Region,
    k: usize,
) -> Result<Vec<RankedResult>, RetrievalError> {
    let mode = index.pooling_mode;
    score_candidates(index, query_id, k, |q, r| {
        let map = simcore::decompose(&q.activation, &q.embedding, &r.embedding, mode)?;
        Ok(simcore::region_score(&map, region))
    })
}

/// Whole-image or region search, optionally grouped by class. With grouping,
/// every candidate is ranked first, the best of `n` classes is kept, and the
/// result is truncated to `k`.
pub fn query(
    index: &EmbeddingIndex,
    query_id: &str,
    k: usize,
    region: Option<&Region>,
    group_classes: Option<usize>,
) -> Result<Vec<RankedResult>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let depth = match group_classes {
        Some(0) => return Err(RetrievalError::InvalidGroupCount),
        Some(_) => index.len().max(1),
        None => k,
    };
    let results = match region {
        Some(r) if !r.is_full() => region_search(index, query_id, r, depth)?,
        _ => search(index, query_id, depth)?,
    };
    Ok(match group_classes {
        Some(n) => {
            let mut grouped = group_by_class(&results, n);
            grouped.truncate(k);
            grouped
        }
        None => results,
    })
}

/// Keeps the best result of each class, up to `n_classes` classes, and
/// renumbers ranks in that order.
pub fn group_by_class(results: &[RankedResult], n_classes: usize) -> Vec<RankedResult> {
    let mut seen = std::collections::HashSet::new();
    let mut grouped: Vec<RankedResult> = results
        .iter()
        .filter(|r| seen.insert(r.class_label.as_str()))
        .take(n_classes)
        .cloned()
        .collect();
    for (i, r) in grouped.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    grouped
}
