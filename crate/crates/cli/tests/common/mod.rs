#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simviz_core::tensor_io::{write_image, RasterImage};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A 48x48 image: class-dependent background plus a few random rectangles.
pub fn synthetic_image(rng: &mut ChaCha8Rng, class: usize) -> RasterImage {
    let (w, h) = (48, 48);
    let base = [
        (40 + 70 * class) % 256,
        (200 + 50 * class) % 256,
        (90 + 110 * class) % 256,
    ];
    let mut px: Vec<u8> = (0..w * h).flat_map(|_| base.map(|b| b as u8)).collect();
    for _ in 0..3 {
        let (x0, y0) = (rng.random_range(0..w - 6), rng.random_range(0..h - 6));
        let (rw, rh) = (rng.random_range(3..18), rng.random_range(3..18));
        let color: [u8; 3] = rng.random();
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                px[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&color);
            }
        }
    }
    RasterImage::new(w, h, px).unwrap()
}

/// Writes `n` seeded images over `classes` class directories under
/// `root/raw` and returns that directory.
pub fn toy_images(root: &Path, n: usize, classes: usize, seed: u64) -> PathBuf {
    let mut r = rng(seed);
    let raw = root.join("raw");
    for i in 0..n {
        let class = i % classes;
        let dir = raw.join(format!("class{class:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        write_image(
            &synthetic_image(&mut r, class),
            &dir.join(format!("img{i:03}.png")),
        )
        .unwrap();
    }
    raw
}

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in-process.
pub fn cli(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("simviz").chain(args.iter().copied());
    let code = simviz_cli::run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
    o.stdout
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Extracts and ingests `n` toy images; returns the index directory.
pub fn toy_index(root: &Path, n: usize, classes: usize, seed: u64, mode: &str) -> PathBuf {
    let raw = toy_images(root, n, classes, seed);
    let data = root.join("data");
    let idx = root.join("idx");
    ok(&[
        "extract",
        "--images",
        path(&raw),
        "--out",
        path(&data),
        "--seed",
        &seed.to_string(),
    ]);
    ok(&[
        "ingest",
        "--manifest",
        path(&data.join("dataset.manifest")),
        "--mode",
        mode,
        "--out",
        path(&idx),
    ]);
    idx
}
