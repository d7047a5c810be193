//! A deterministic stand-in for a convolutional backbone: one seeded random
//! filter bank applied as a non-overlapping stride-`f` convolution plus ReLU.
//!
//! Weights come from splitmix64 so the same seed yields the same bank on every
//! platform, and every accumulation runs in a fixed order, so identical inputs
//! give bit-identical activations.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::interp::{lerp, source_coord};
use crate::simcore::ActivationTensor;
use crate::tensor_io::RasterImage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("image {width}x{height} is smaller than the {filter_size}x{filter_size} filter")]
    ImageTooSmall {
        width: usize,
        height: usize,
        filter_size: usize,
    },
    #[error("invalid extractor config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub channels: usize,
    pub filter_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 32,
            filter_size: 8,
            grid_h: 7,
            grid_w: 7,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.channels == 0 || self.filter_size == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(ExtractError::InvalidConfig(format!(
                "channels, filter_size and grid must all be positive: {self}"
            )));
        }
        Ok(())
    }

    /// `key=value` lines for the `extractor.meta` sidecar.
    pub fn to_meta(&self) -> String {
        format!(
            "seed={}\nchannels={}\nfilter_size={}\ngrid={}x{}\nnonlinearity=relu\n",
            self.seed, self.channels, self.filter_size, self.grid_h, self.grid_w
        )
    }

    pub fn from_meta(text: &str) -> Result<Self, ExtractError> {
        let bad = |msg: String| ExtractError::InvalidConfig(msg);
        let mut cfg = ExtractorConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                "channels" => cfg.channels = int(value)?,
                "filter_size" => cfg.filter_size = int(value)?,
                "grid" => (cfg.grid_h, cfg.grid_w) = parse_grid(value).map_err(bad)?,
                "nonlinearity" if value == "relu" => {}
                _ => return Err(bad(format!("unexpected entry {line:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ExtractorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed={} channels={} filter={} grid={}x{}",
            self.seed, self.channels, self.filter_size, self.grid_h, self.grid_w
        )
    }
}

/// Parses `HxW`.
pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid {s:?} must look like HxW"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("grid {s:?}: {e}"))
    };
    Ok((parse(h)?, parse(w)?))
}

/// The splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Maps a 64-bit draw to `draw / 2^63 - 1`.
pub fn draw_to_weight(draw: u64) -> f64 {
    draw as f64 / 9_223_372_036_854_775_808.0 - 1.0
}

/// `channels` filters of `f × f × 3` weights, laid out `(c, fy, fx, rgb)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    channels: usize,
    filter_size: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn filter(&self, c: usize) -> &[f64] {
        let len = self.filter_size * self.filter_size * 3;
        &self.weights[c * len..(c + 1) * len]
    }
}

pub fn make_filter_bank(cfg: &ExtractorConfig) -> FilterBank {
    let mut rng = SplitMix64::new(cfg.seed);
    let n = cfg.channels * cfg.filter_size * cfg.filter_size * 3;
    FilterBank {
        channels: cfg.channels,
        filter_size: cfg.filter_size,
        weights: (0..n).map(|_| draw_to_weight(rng.next_u64())).collect(),
    }
}

pub fn extract(img: &RasterImage, cfg: &ExtractorConfig) -> Result<ActivationTensor, ExtractError> {
    cfg.validate()?;
    extract_with_bank(img, &make_filter_bank(cfg), cfg.grid_h, cfg.grid_w)
}

/// Runs a prebuilt bank, so batch extraction draws the weights once.
pub fn extract_with_bank(
    img: &RasterImage,
    bank: &FilterBank,
    grid_h: usize,
    grid_w: usize,
) -> Result<ActivationTensor, ExtractError> {
    let f = bank.filter_size;
    if img.width() < f || img.height() < f {
        return Err(ExtractError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            filter_size: f,
        });
    }
    let (rows, cols) = (grid_h * f, grid_w * f);
    let resized = resize_normalized(img, cols, rows);

    let mut values = Vec::with_capacity(grid_h * grid_w * bank.channels);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for c in 0..bank.channels {
                let weights = bank.filter(c);
                let mut acc = 0.0;
                let mut k = 0;
                for fy in 0..f {
                    let row = (gy * f + fy) * cols;
                    for fx in 0..f {
                        let px = 3 * (row + gx * f + fx);
                        for ch in 0..3 {
                            acc += weights[k] * resized[px + ch];
                            k += 1;
                        }
                    }
                }
                values.push(if acc > 0.0 { acc } else { 0.0 });
            }
        }
    }
    Ok(ActivationTensor::new(grid_h, grid_w, bank.channels, values)
        .expect("extractor output shape matches its config"))
}

/// Pixels scaled to `[0, 1]` and bilinearly resized to `width × height`.
fn resize_normalized(img: &RasterImage, width: usize, height: usize) -> Vec<f64> {
    let src: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect();
    let at = |x: usize, y: usize, ch: usize| src[3 * (y * img.width() + x) + ch];
    let xs: Vec<_> = (0..width)
        .map(|x| source_coord(x, width, img.width()))
        .collect();
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, ty) = source_coord(y, height, img.height());
        for &(x0, x1, tx) in &xs {
            for ch in 0..3 {
                let top = lerp(at(x0, y0, ch), at(x1, y0, ch), tx);
                let bottom = lerp(at(x0, y1, ch), at(x1, y1, ch), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

impl FromStr for ExtractorConfig {
    type Err = ExtractError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_meta(s)
    }
}
