#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simviz_core::dataset;
use simviz_core::tensor_io::{write_image, DatasetManifest, RasterImage};
use simviz_core::toyextract::ExtractorConfig;
use simviz_core::{ActivationTensor, PooledEmbedding, PoolingMode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    signed: bool,
) -> ActivationTensor {
    let lo = if signed { -1.0 } else { 0.0 };
    let values = (0..h * w * c).map(|_| rng.random_range(lo..1.0)).collect();
    ActivationTensor::new(h, w, c, values).unwrap()
}

pub fn random_embedding(rng: &mut ChaCha8Rng, c: usize, signed: bool) -> PooledEmbedding {
    let lo = if signed { -1.0 } else { 0.0 };
    PooledEmbedding::new(
        (0..c).map(|_| rng.random_range(lo..1.0)).collect(),
        PoolingMode::Avg,
        (1, 1),
    )
    .unwrap()
}

/// A 64x64 image: class-dependent background plus a few random rectangles.
pub fn synthetic_image(rng: &mut ChaCha8Rng, class: usize) -> RasterImage {
    let (w, h) = (64, 64);
    let base = [
        (40 + 70 * class) % 256,
        (200 + 50 * class) % 256,
        (90 + 110 * class) % 256,
    ];
    let mut px = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        px.extend(base.iter().map(|&b| b as u8));
    }
    for _ in 0..3 {
        let (x0, y0) = (rng.random_range(0..w - 8), rng.random_range(0..h - 8));
        let (rw, rh) = (rng.random_range(4..24), rng.random_range(4..24));
        let color: [u8; 3] = rng.random();
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                px[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&color);
            }
        }
    }
    RasterImage::new(w, h, px).unwrap()
}

/// Writes `n` seeded images spread over `classes` class directories and
/// extracts them into `root/data`.
pub fn toy_dataset(root: &Path, n: usize, classes: usize, seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let images = root.join("images");
    for i in 0..n {
        let class = i % classes;
        let dir = images.join(format!("class{class:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        let img = synthetic_image(&mut r, class);
        write_image(&img, &dir.join(format!("img{i:03}.png"))).unwrap();
    }
    let cfg = ExtractorConfig {
        seed,
        ..Default::default()
    };
    dataset::extract_directory(&images, &root.join("data"), &cfg).unwrap()
}
