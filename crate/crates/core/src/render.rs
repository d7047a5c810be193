//! Heatmap overlays: bilinear upsampling of a similarity map to image
//! resolution, a fixed blue-green-red colormap, and alpha blending.
//!
//! Every step rounds half-up at fixed points so identical inputs produce
//! identical pixels.

use thiserror::Error;

use crate::interp::{lerp, source_coord};
use crate::simcore::SimilarityMap;
use crate::tensor_io::RasterImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("dimension mismatch: base is {base:?}, heat is {heat:?}")]
    DimensionMismatch {
        base: (usize, usize),
        heat: (usize, usize),
    },
    #[error("invalid render options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Divide by the map's own maximum.
    PerMap,
    /// Divide by a scale shared across a set of maps (their largest |cell|).
    Shared(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeHandling {
    ClampToZero,
    /// Map `[-scale, scale]` onto `[0, 1]`.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub alpha: f64,
    pub normalization: Normalization,
    pub negative_handling: NegativeHandling,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            normalization: Normalization::PerMap,
            negative_handling: NegativeHandling::ClampToZero,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RenderError::InvalidOptions(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if let Normalization::Shared(s) = self.normalization {
            if !s.is_finite() || s < 0.0 {
                return Err(RenderError::InvalidOptions(format!(
                    "shared scale {s} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// A real-valued raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Bilinear interpolation between cell centers, edge-replicated outside them.
pub fn upsample_bilinear(map: &SimilarityMap, out_w: usize, out_h: usize) -> Field {
    let (gw, gh) = (map.grid_w(), map.grid_h());
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, out_w, gw)).collect();
    let mut values = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, ty) = source_coord(y, out_h, gh);
        for &(x0, x1, tx) in &xs {
            let top = lerp(map.cell(y0, x0), map.cell(y0, x1), tx);
            let bottom = lerp(map.cell(y1, x0), map.cell(y1, x1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    Field {
        width: out_w,
        height: out_h,
        values,
    }
}

/// Position of each value on the colormap, in `[0, 1]`.
pub fn normalize(field: &Field, opts: &RenderOptions) -> Vec<f64> {
    match opts.negative_handling {
        NegativeHandling::ClampToZero => {
            let clamped = field.values.iter().map(|v| v.max(0.0));
            let scale = match opts.normalization {
                Normalization::PerMap => clamped.clone().fold(0.0, f64::max),
                Normalization::Shared(s) => s,
            };
            clamped
                .map(|v| {
                    if scale > 0.0 {
                        (v / scale).min(1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        NegativeHandling::Signed => {
            let scale = match opts.normalization {
                Normalization::PerMap => field.values.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                Normalization::Shared(s) => s,
            };
            field
                .values
                .iter()
                .map(|v| {
                    if scale > 0.0 {
                        ((v / scale).clamp(-1.0, 1.0) + 1.0) / 2.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Piecewise-linear blue (0) → green (0.5) → red (1). Within each half the
/// rising channel is rounded half-up and the falling one is its complement.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        let g = round_half_up(510.0 * t);
        [0, g, 255 - g]
    } else {
        let r = round_half_up(510.0 * (t - 0.5));
        [r, 255 - r, 0]
    }
}

pub fn apply_colormap(field: &Field, opts: &RenderOptions) -> RasterImage {
    let pixels = normalize(field, opts)
        .into_iter()
        .flat_map(colormap)
        .collect();
    RasterImage::new(field.width, field.height, pixels).expect("field dimensions are positive")
}

pub fn blend(
    base: &RasterImage,
    heat: &RasterImage,
    alpha: f64,
) -> Result<RasterImage, RenderError> {
    if (base.width(), base.height()) != (heat.width(), heat.height()) {
        return Err(RenderError::DimensionMismatch {
            base: (base.width(), base.height()),
            heat: (heat.width(), heat.height()),
        });
    }
    let pixels = base
        .pixels()
        .iter()
        .zip(heat.pixels())
        .map(|(&b, &h)| round_half_up((1.0 - alpha) * f64::from(b) + alpha * f64::from(h)))
        .collect();
    Ok(RasterImage::new(base.width(), base.height(), pixels).expect("same dimensions as base"))
}

/// Upsamples `map` to `base`'s size, colors it, and blends it over `base`.
pub fn render_overlay(
    map: &SimilarityMap,
    base: &RasterImage,
    opts: &RenderOptions,
) -> Result<RasterImage, RenderError> {
    opts.validate()?;
    let field = upsample_bilinear(map, base.width(), base.height());
    blend(base, &apply_colormap(&field, opts), opts.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{Direction, PoolingMode};

    fn map(h: usize, w: usize, cells: &[f64]) -> SimilarityMap {
        SimilarityMap::from_cells(h, w, cells.to_vec(), PoolingMode::Avg, Direction::Forward)
            .unwrap()
    }

    #[test]
    fn upsample_constant_and_single_cell() {
        let f = upsample_bilinear(&map(3, 2, &[0.3; 6]), 17, 5);
        assert!(f.values.iter().all(|&v| v == 0.3));
        let f = upsample_bilinear(&map(1, 1, &[-2.5]), 4, 9);
        assert!(f.values.iter().all(|&v| v == -2.5));
    }

    #[test]
    fn upsample_two_by_two() {
        let f = upsample_bilinear(&map(2, 2, &[0.0, 1.0, 0.0, 1.0]), 4, 4);
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| f.get(x, y)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn colormap_anchors_and_quarter() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [0, 255, 0]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert_eq!(colormap(0.25), [0, 128, 127]);
        assert_eq!(colormap(0.75), [128, 127, 0]);
    }

    #[test]
    fn all_zero_map_is_uniform_blue() {
        let f = upsample_bilinear(&map(2, 2, &[0.0; 4]), 3, 3);
        for opts in [
            RenderOptions::default(),
            RenderOptions {
                negative_handling: NegativeHandling::Signed,
                ..Default::default()
            },
        ] {
            let img = apply_colormap(&f, &opts);
            assert!(img.pixels().chunks(3).all(|p| p == [0, 0, 255]));
        }
    }

    #[test]
    fn signed_and_shared_normalization() {
        let f = Field {
            width: 3,
            height: 1,
            values: vec![-2.0, 0.0, 1.0],
        };
        let signed = RenderOptions {
            negative_handling: NegativeHandling::Signed,
            ..Default::default()
        };
        assert_eq!(normalize(&f, &signed), vec![0.0, 0.5, 0.75]);
        assert_eq!(
            normalize(&f, &RenderOptions::default()),
            vec![0.0, 0.0, 1.0]
        );
        let shared = RenderOptions {
            normalization: Normalization::Shared(4.0),
            ..Default::default()
        };
        assert_eq!(normalize(&f, &shared), vec![0.0, 0.0, 0.25]);
    }

    #[test]
    fn blend_examples() {
        let base = RasterImage::filled(2, 1, [100, 100, 100]).unwrap();
        let heat = RasterImage::filled(2, 1, [200, 0, 50]).unwrap();
        assert_eq!(blend(&base, &heat, 0.0).unwrap(), base);
        assert_eq!(blend(&base, &heat, 1.0).unwrap(), heat);
        assert_eq!(blend(&base, &heat, 0.5).unwrap().pixel(0, 0), [150, 50, 75]);
        let small = RasterImage::filled(1, 1, [0, 0, 0]).unwrap();
        assert!(matches!(
            blend(&base, &small, 0.5),
            Err(RenderError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_alpha() {
        let opts = RenderOptions {
            alpha: 1.5,
            ..Default::default()
        };
        let base = RasterImage::filled(2, 2, [0, 0, 0]).unwrap();
        assert!(render_overlay(&map(1, 1, &[1.0]), &base, &opts).is_err());
    }
}
