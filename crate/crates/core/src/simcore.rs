//! Pooling, cosine similarity, and spatial decomposition of the similarity
//! between two pooled embeddings into per-cell contribution maps.
//!
//! For an activation tensor `α` of shape `H × W × C` and its pooled vector
//! `β`, the cosine similarity `s(β_i, β_j)` splits exactly into one term per
//! spatial cell of `α_i`:
//!
//! * average pooling: `cell(y, x) = α_i(y, x) · β_j / (H · W · ‖β_i‖ · ‖β_j‖)`
//! * max pooling: the same with `α_i` replaced by its surrogate `α̂_i`, which
//!   keeps each channel's maximum at its argmax cells (split evenly among ties)
//!   and zero elsewhere, and without the `H · W` factor.
//!
//! All arithmetic is `f64` with a fixed `(y, x, c)` summation order.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Relative tolerance for the pooling-consistency check in [`decompose`].
pub const POOLING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("embedding disagrees with {mode} pooling of its activation at channel {channel}: {found} vs {expected}")]
    PoolingInconsistent {
        mode: PoolingMode,
        channel: usize,
        expected: f64,
        found: f64,
    },
    #[error("total similarity is zero; contribution fractions are undefined")]
    ZeroSimilarity,
    #[error("class has no members")]
    EmptyClass,
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    Avg,
    Max,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Avg => "avg",
            PoolingMode::Max => "max",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(PoolingMode::Avg),
            "max" => Ok(PoolingMode::Max),
            other => Err(format!(
                "unknown pooling mode {other:?} (expected avg or max)"
            )),
        }
    }
}

/// Last-convolutional-layer activations, stored row-major as `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self, SimError> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(SimError::InvalidTensor(format!(
                "shape {grid_h}x{grid_w}x{channels} has a zero dimension"
            )));
        }
        let expected = grid_h * grid_w * channels;
        if values.len() != expected {
            return Err(SimError::InvalidTensor(format!(
                "shape {grid_h}x{grid_w}x{channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SimError::InvalidTensor(format!(
                "non-finite value at flat index {i}"
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            channels,
            values,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.grid_w + x) * self.channels + c]
    }

    /// The `C`-dimensional slice at one spatial cell.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.grid_w + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    components: Vec<f64>,
    mode: PoolingMode,
    source_grid: (usize, usize),
}

impl PooledEmbedding {
    pub fn new(
        components: Vec<f64>,
        mode: PoolingMode,
        source_grid: (usize, usize),
    ) -> Result<Self, SimError> {
        if components.is_empty() {
            return Err(SimError::InvalidTensor(
                "embedding has no components".into(),
            ));
        }
        if let Some(i) = components.iter().position(|v| !v.is_finite()) {
            return Err(SimError::InvalidTensor(format!(
                "non-finite embedding component {i}"
            )));
        }
        Ok(Self {
            components,
            mode,
            source_grid,
        })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mode(&self) -> PoolingMode {
        self.mode
    }

    pub fn source_grid(&self) -> (usize, usize) {
        self.source_grid
    }

    pub fn norm(&self) -> f64 {
        dot(&self.components, &self.components).sqrt()
    }

    /// Same embedding with every component multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            components: self.components.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// Which image of a pair `(i, j)` a map is laid out over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Over the first image's grid: contributions of `i`'s cells.
    Forward,
    /// Over the second image's grid.
    Reverse,
}

/// Per-cell contributions to a similarity score.
///
/// `total` is the similarity being decomposed; the cells sum to it up to
/// floating-point rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    grid_h: usize,
    grid_w: usize,
    cells: Vec<f64>,
    total: f64,
    direction: Direction,
    mode: PoolingMode,
}

impl SimilarityMap {
    /// Builds a map whose total is the left-to-right sum of `cells`.
    pub fn from_cells(
        grid_h: usize,
        grid_w: usize,
        cells: Vec<f64>,
        mode: PoolingMode,
        direction: Direction,
    ) -> Result<Self, SimError> {
        if grid_h == 0 || grid_w == 0 || cells.len() != grid_h * grid_w {
            return Err(SimError::InvalidTensor(format!(
                "{} cells do not fill a {grid_h}x{grid_w} grid",
                cells.len()
            )));
        }
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidTensor("non-finite map cell".into()));
        }
        let total = cells.iter().sum();
        Ok(Self {
            grid_h,
            grid_w,
            cells,
            total,
            direction,
            mode,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    /// Row-major cell values.
    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cell(&self, y: usize, x: usize) -> f64 {
        self.cells[y * self.grid_w + x]
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn mode(&self) -> PoolingMode {
        self.mode
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn cell_sum(&self) -> f64 {
        self.cells.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.cells.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Max-pooling stand-in for an activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTensor {
    tensor: ActivationTensor,
    tie_counts: Vec<usize>,
}

impl SurrogateTensor {
    pub fn tensor(&self) -> &ActivationTensor {
        &self.tensor
    }

    /// Number of cells sharing each channel's maximum.
    pub fn tie_counts(&self) -> &[usize] {
        &self.tie_counts
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.tensor.get(y, x, c)
    }
}

/// Axis-aligned rectangle in normalized image coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, SimError> {
        let coords = [x0, y0, x1, y1];
        if coords.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SimError::InvalidRegion(format!(
                "coordinates {coords:?} must lie in [0, 1]"
            )));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(SimError::InvalidRegion(format!(
                "({x0}, {y0}, {x1}, {y1}) has no positive area"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn is_full(&self) -> bool {
        self.coords() == [0.0, 0.0, 1.0, 1.0]
    }
}

impl FromStr for Region {
    type Err = SimError;

    /// Parses `x0,y0,x1,y1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::InvalidRegion(format!("{s:?}: {e}")))?;
        match parts.as_slice() {
            &[x0, y0, x1, y1] => Region::new(x0, y0, x1, y1),
            _ => Err(SimError::InvalidRegion(format!(
                "{s:?}: expected x0,y0,x1,y1"
            ))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn avg_pool(alpha: &ActivationTensor) -> PooledEmbedding {
    let mut sums = vec![0.0; alpha.channels];
    for cell in alpha.cells() {
        for (s, v) in sums.iter_mut().zip(cell) {
            *s += v;
        }
    }
    let n = (alpha.grid_h * alpha.grid_w) as f64;
    PooledEmbedding {
        components: sums.into_iter().map(|s| s / n).collect(),
        mode: PoolingMode::Avg,
        source_grid: (alpha.grid_h, alpha.grid_w),
    }
}

pub fn max_pool(alpha: &ActivationTensor) -> PooledEmbedding {
    PooledEmbedding {
        components: channel_maxima(alpha),
        mode: PoolingMode::Max,
        source_grid: (alpha.grid_h, alpha.grid_w),
    }
}

pub fn pool(alpha: &ActivationTensor, mode: PoolingMode) -> PooledEmbedding {
    match mode {
        PoolingMode::Avg => avg_pool(alpha),
        PoolingMode::Max => max_pool(alpha),
    }
}

fn channel_maxima(alpha: &ActivationTensor) -> Vec<f64> {
    let mut cells = alpha.cells();
    let mut maxima = cells.next().expect("tensor has at least one cell").to_vec();
    for cell in cells {
        for (m, &v) in maxima.iter_mut().zip(cell) {
            if v > *m {
                *m = v;
            }
        }
    }
    maxima
}

fn check_pair(a: &PooledEmbedding, b: &PooledEmbedding) -> Result<(f64, f64), SimError> {
    if a.len() != b.len() {
        return Err(SimError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SimError::ZeroNormEmbedding);
    }
    Ok((na, nb))
}

/// `(β_i · β_j) / (‖β_i‖ ‖β_j‖)`.
pub fn cosine_similarity(
    beta_i: &PooledEmbedding,
    beta_j: &PooledEmbedding,
) -> Result<f64, SimError> {
    let (ni, nj) = check_pair(beta_i, beta_j)?;
    Ok(dot(&beta_i.components, &beta_j.components) / (ni * nj))
}

/// Keeps each channel's maximum at the cells that attain it, divided evenly
/// among ties, and zeroes every other cell. Ties use exact equality.
pub fn surrogate(alpha: &ActivationTensor) -> SurrogateTensor {
    let maxima = channel_maxima(alpha);
    let mut tie_counts = vec![0usize; alpha.channels];
    for cell in alpha.cells() {
        for ((n, &m), &v) in tie_counts.iter_mut().zip(&maxima).zip(cell) {
            if v == m {
                *n += 1;
            }
        }
    }
    let shares: Vec<f64> = maxima
        .iter()
        .zip(&tie_counts)
        .map(|(&m, &n)| m / n as f64)
        .collect();
    let values = alpha
        .cells()
        .flat_map(|cell| {
            cell.iter()
                .zip(&maxima)
                .zip(&shares)
                .map(|((&v, &m), &share)| if v == m { share } else { 0.0 })
        })
        .collect();
    SurrogateTensor {
        tensor: ActivationTensor {
            values,
            ..alpha.clone()
        },
        tie_counts,
    }
}

fn check_pooling(
    alpha: &ActivationTensor,
    beta: &PooledEmbedding,
    mode: PoolingMode,
) -> Result<(), SimError> {
    if alpha.channels != beta.len() {
        return Err(SimError::DimensionMismatch {
            expected: alpha.channels,
            found: beta.len(),
        });
    }
    let pooled = pool(alpha, mode);
    for (channel, (&expected, &found)) in pooled.components.iter().zip(&beta.components).enumerate()
    {
        let diff = (expected - found).abs();
        if beta.mode != mode || diff > POOLING_TOLERANCE * expected.abs().max(found.abs()) {
            return Err(SimError::PoolingInconsistent {
                mode,
                channel,
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Spatial similarity map over `α_i`'s grid for the pair `(β_i, β_j)`.
///
/// `beta_i` must be `pool(alpha_i, mode)`; this is checked to within
/// [`POOLING_TOLERANCE`].
pub fn decompose(
    alpha_i: &ActivationTensor,
    beta_i: &PooledEmbedding,
    beta_j: &PooledEmbedding,
    mode: PoolingMode,
) -> Result<SimilarityMap, SimError> {
    let (ni, nj) = check_pair(beta_i, beta_j)?;
    check_pooling(alpha_i, beta_i, mode)?;
    let total = dot(&beta_i.components, &beta_j.components) / (ni * nj);

    let cells = match mode {
        PoolingMode::Avg => {
            let z = (alpha_i.grid_h * alpha_i.grid_w) as f64 * ni * nj;
            alpha_i
                .cells()
                .map(|cell| dot(cell, &beta_j.components) / z)
                .collect()
        }
        PoolingMode::Max => {
            let z = ni * nj;
            surrogate(alpha_i)
                .tensor
                .cells()
                .map(|cell| dot(cell, &beta_j.components) / z)
                .collect()
        }
    };
    Ok(SimilarityMap {
        grid_h: alpha_i.grid_h,
        grid_w: alpha_i.grid_w,
        cells,
        total,
        direction: Direction::Forward,
        mode,
    })
}

/// Cumulative fraction of the similarity explained by the `k` largest
/// per-component products, for `k = 1..=C`.
pub fn top_k_contribution_curve(
    beta_i: &PooledEmbedding,
    beta_j: &PooledEmbedding,
) -> Result<Vec<f64>, SimError> {
    let (ni, nj) = check_pair(beta_i, beta_j)?;
    let mut contributions: Vec<f64> = beta_i
        .components
        .iter()
        .zip(&beta_j.components)
        .map(|(a, b)| a * b / (ni * nj))
        .collect();
    contributions.sort_by(|a, b| b.total_cmp(a));

    let mut running = 0.0;
    let cumulative: Vec<f64> = contributions
        .iter()
        .map(|c| {
            running += c;
            running
        })
        .collect();
    let total = running;
    if total == 0.0 {
        return Err(SimError::ZeroSimilarity);
    }
    Ok(cumulative.into_iter().map(|s| s / total).collect())
}

/// Cellwise sum of the query's pairwise maps against every member, in order.
pub fn class_map(
    alpha_q: &ActivationTensor,
    beta_q: &PooledEmbedding,
    members: &[&PooledEmbedding],
    mode: PoolingMode,
) -> Result<SimilarityMap, SimError> {
    let (first, rest) = members.split_first().ok_or(SimError::EmptyClass)?;
    let mut acc = decompose(alpha_q, beta_q, first, mode)?;
    for member in rest {
        let m = decompose(alpha_q, beta_q, member, mode)?;
        for (a, v) in acc.cells.iter_mut().zip(&m.cells) {
            *a += v;
        }
        acc.total += m.total;
    }
    Ok(acc)
}

/// Map mass inside `region`, weighting each cell by the fraction of its
/// footprint the region covers. The full image scores the map's total.
pub fn region_score(map: &SimilarityMap, region: &Region) -> f64 {
    if region.is_full() {
        return map.total;
    }
    let overlap = |lo: f64, hi: f64, n: usize, i: usize| {
        let (lo, hi) = (lo * n as f64, hi * n as f64);
        (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0)
    };
    let wx: Vec<f64> = (0..map.grid_w)
        .map(|x| overlap(region.x0, region.x1, map.grid_w, x))
        .collect();
    let mut score = 0.0;
    for y in 0..map.grid_h {
        let wy = overlap(region.y0, region.y1, map.grid_h, y);
        if wy == 0.0 {
            continue;
        }
        for (x, w) in wx.iter().enumerate() {
            if *w > 0.0 {
                score += map.cell(y, x) * w * wy;
            }
        }
    }
    score
}
