//! Acceptance gate: runs every primary criterion and prints one PASS/FAIL
//! line per criterion. Exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use simviz_core::dataset::extract_directory;
use simviz_core::simcore::{
    class_map, decompose, max_pool, pool, region_score, surrogate, top_k_contribution_curve,
};
use simviz_core::tensor_io::{
    read_array, read_array_file, write_array, write_image, ArrayData, ArrayFile,
};
use simviz_core::toyextract::ExtractorConfig;
use simviz_core::{
    build_index, region_search, search, ActivationTensor, EmbeddingIndex, PooledEmbedding,
    PoolingMode, Region,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_tensor(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    signed: bool,
) -> ActivationTensor {
    let lo = if signed { -1.0 } else { 0.0 };
    ActivationTensor::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.random_range(lo..1.0)).collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn pool_oracle(t: &ActivationTensor, mode: PoolingMode) -> Vec<f64> {
    (0..t.channels())
        .map(|c| {
            let vals = (0..t.grid_h())
                .flat_map(|y| (0..t.grid_w()).map(move |x| (y, x)))
                .map(|(y, x)| t.get(y, x, c));
            match mode {
                PoolingMode::Avg => vals.sum::<f64>() / (t.grid_h() * t.grid_w()) as f64,
                PoolingMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Extracts seeded images laid out as `classes[k]` members of class `k` and
/// returns the data directory's index in `mode`.
fn toy_index(
    root: &Path,
    class_sizes: &[usize],
    duplicates: usize,
    seed: u64,
    mode: PoolingMode,
) -> EmbeddingIndex {
    let mut rng = common::rng(seed);
    let raw = root.join("raw");
    let mut written = Vec::new();
    let mut n = 0;
    for (class, &size) in class_sizes.iter().enumerate() {
        let dir = raw.join(format!("class{class:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        for _ in 0..size {
            let path = dir.join(format!("img{n:03}.png"));
            write_image(&common::synthetic_image(&mut rng, class), &path).unwrap();
            written.push(path);
            n += 1;
        }
    }
    for d in 0..duplicates {
        let src = &written[rng.random_range(0..written.len())];
        std::fs::copy(src, src.with_file_name(format!("dup{d:03}.png"))).unwrap();
    }
    let cfg = ExtractorConfig {
        seed,
        ..Default::default()
    };
    let manifest = extract_directory(&raw, &root.join("data"), &cfg).unwrap();
    build_index(&manifest, mode).unwrap()
}

fn c1_decomposition_identity() -> Outcome {
    let mut rng = common::rng(101);
    let channels = [1, 3, 32, 64];
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for n in 0..1296 {
        let (h, w) = (1 + n % 9, 1 + (n / 9) % 9);
        let c = channels[(n / 81) % 4];
        let signed = n % 2 == 1;
        let mode = if (n / 2) % 2 == 0 {
            PoolingMode::Avg
        } else {
            PoolingMode::Max
        };
        let a = random_tensor(&mut rng, h, w, c, signed);
        let b = random_tensor(&mut rng, h, w, c, signed);
        let (pa, pb) = (pool_oracle(&a, mode), pool_oracle(&b, mode));
        if dot(&pa, &pa) == 0.0 || dot(&pb, &pb) == 0.0 {
            continue;
        }
        let s = cosine_oracle(&pa, &pb);
        let (ba, bb) = (pool(&a, mode), pool(&b, mode));
        for m in [decompose(&a, &ba, &bb, mode), decompose(&b, &bb, &ba, mode)] {
            let m = m.map_err(|e| format!("{h}x{w}x{c} {mode}: {e}"))?;
            let err = (m.cell_sum() - s).abs();
            if s == 0.0 {
                ensure!(
                    err <= 1e-12,
                    "{h}x{w}x{c} {mode}: |sum| = {err:e} with zero similarity"
                );
            } else {
                ensure!(
                    err <= 1e-9 * s.abs(),
                    "{h}x{w}x{c} {mode}: sum {} vs {s}",
                    m.cell_sum()
                );
                worst = worst.max(err / s.abs());
            }
        }
        pairs += 1;
    }
    ensure!(pairs >= 1000, "only {pairs} usable pairs");
    Ok(format!(
        "{pairs} pairs, both directions, worst relative error {worst:.2e}"
    ))
}

fn c2_surrogate() -> Outcome {
    let mut rng = common::rng(102);
    let (mut ties, mut zeros, mut channels_checked) = (0, 0, 0);
    for n in 0..300 {
        let (h, w, c) = (1 + n % 9, 1 + (n / 3) % 9, 1 + n % 16);
        let signed = n % 3 == 0;
        let mut values = random_tensor(&mut rng, h, w, c, signed).values().to_vec();
        let mut expect_ties = vec![1usize; c];
        for ch in 0..c {
            match rng.random_range(0..4) {
                0 => {
                    for cell in 0..h * w {
                        values[cell * c + ch] = 0.0;
                    }
                    expect_ties[ch] = h * w;
                    zeros += 1;
                }
                1 if h * w >= 2 => {
                    let k = rng.random_range(2..=4usize.min(h * w));
                    let mut cells: Vec<usize> = (0..h * w).collect();
                    cells.shuffle(&mut rng);
                    for &cell in &cells[..k] {
                        values[cell * c + ch] = 1.5;
                    }
                    expect_ties[ch] = k;
                    ties += 1;
                }
                _ => {}
            }
        }
        let t = ActivationTensor::new(h, w, c, values).unwrap();
        let s = surrogate(&t);
        let m = max_pool(&t);
        for (ch, &expected_ties) in expect_ties.iter().enumerate() {
            let max = m.components()[ch];
            let mut sum = 0.0;
            let mut at_max = 0;
            for y in 0..h {
                for x in 0..w {
                    let v = s.get(y, x, ch);
                    sum += v;
                    if t.get(y, x, ch) == max {
                        at_max += 1;
                    } else {
                        ensure!(v == 0.0, "non-argmax cell carries {v}");
                    }
                }
            }
            ensure!((sum - max).abs() <= 1e-12, "channel sum {sum} vs max {max}");
            ensure!(
                s.tie_counts()[ch] == at_max,
                "tie count {} vs {at_max}",
                s.tie_counts()[ch]
            );
            ensure!(
                expected_ties == 1 || at_max == expected_ties,
                "engineered {expected_ties} ties, found {at_max}"
            );
            channels_checked += 1;
        }
    }
    Ok(format!(
        "{channels_checked} channels, {ties} with engineered ties, {zeros} all-zero"
    ))
}

fn guillotine_partition(rng: &mut ChaCha8Rng, pieces: usize) -> Vec<[f64; 4]> {
    let mut rects = vec![[0.0, 0.0, 1.0, 1.0]];
    while rects.len() < pieces {
        let [x0, y0, x1, y1] = rects.swap_remove(rng.random_range(0..rects.len()));
        let t = rng.random_range(0.05..0.95);
        if rng.random_bool(0.5) {
            let xm = x0 + t * (x1 - x0);
            rects.extend([[x0, y0, xm, y1], [xm, y0, x1, y1]]);
        } else {
            let ym = y0 + t * (y1 - y0);
            rects.extend([[x0, y0, x1, ym], [x0, ym, x1, y1]]);
        }
    }
    rects
}

fn c3_region_additivity() -> Outcome {
    let mut rng = common::rng(103);
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let c = rng.random_range(1..=32);
        let mode = if n % 2 == 0 {
            PoolingMode::Avg
        } else {
            PoolingMode::Max
        };
        let a = random_tensor(&mut rng, h, w, c, false);
        let b = random_tensor(&mut rng, h, w, c, false);
        let map =
            decompose(&a, &pool(&a, mode), &pool(&b, mode), mode).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let pieces = rng.random_range(2..=16);
            let mut sum = 0.0;
            for [x0, y0, x1, y1] in guillotine_partition(&mut rng, pieces) {
                let region = Region::new(x0, y0, x1, y1).map_err(|e| e.to_string())?;
                sum += region_score(&map, &region);
            }
            let rel = (sum - map.total()).abs() / map.total().abs();
            ensure!(
                rel <= 1e-9,
                "map {n} ({h}x{w}): partition sum {sum} vs total {}",
                map.total()
            );
            worst = worst.max(rel);
        }
    }
    Ok(format!(
        "100 maps x 20 partitions, worst relative error {worst:.2e}"
    ))
}

fn c4_full_region_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0;
    for mode in [PoolingMode::Avg, PoolingMode::Max] {
        let index = toy_index(
            dir.path().join(mode.to_string()).as_path(),
            &[10; 5],
            0,
            104,
            mode,
        );
        ensure!(index.len() == 50, "index has {} records", index.len());
        for q in index.records() {
            let plain = search(&index, &q.id, 49).map_err(|e| e.to_string())?;
            let full =
                region_search(&index, &q.id, &Region::full(), 49).map_err(|e| e.to_string())?;
            ensure!(plain.len() == full.len(), "{}: lengths differ", q.id);
            for (a, b) in plain.iter().zip(&full) {
                ensure!(
                    a.id == b.id && a.rank == b.rank,
                    "{}: order differs at rank {}",
                    q.id,
                    a.rank
                );
                ensure!(
                    (a.score - b.score).abs() <= 1e-9 * a.score.abs(),
                    "{}: {} vs {}",
                    q.id,
                    a.score,
                    b.score
                );
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} queries over a 50-record index in both pooling modes"
    ))
}

fn c5_retrieval_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut report = Vec::new();
    for (n_unique, dups) in [(8usize, 2usize), (45, 5), (180, 20)] {
        let sizes: Vec<usize> = (0..6)
            .map(|c| n_unique / 6 + usize::from(c < n_unique % 6))
            .collect();
        let root = dir.path().join(format!("n{n_unique}"));
        let index = toy_index(&root, &sizes, dups, 105 + n_unique as u64, PoolingMode::Avg);
        let n = index.len();
        ensure!(n == n_unique + dups, "index has {n} records");
        let mut tied_pairs = 0;
        for q in index.records() {
            let mut oracle: Vec<(f64, &str)> = index
                .records()
                .iter()
                .filter(|r| r.id != q.id)
                .map(|r| {
                    (
                        cosine_oracle(q.embedding.components(), r.embedding.components()),
                        r.id.as_str(),
                    )
                })
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            tied_pairs += oracle.windows(2).filter(|w| w[0].0 == w[1].0).count();
            let got = search(&index, &q.id, n).map_err(|e| e.to_string())?;
            ensure!(got.len() == n - 1, "{}: {} results", q.id, got.len());
            for (k, (r, (s, id))) in got.iter().zip(&oracle).enumerate() {
                ensure!(
                    r.rank == k + 1 && r.id == *id,
                    "{}: rank {} is {} but oracle says {id}",
                    q.id,
                    k + 1,
                    r.id
                );
                ensure!(
                    (r.score - s).abs() <= 1e-12,
                    "{}: score {} vs {s}",
                    q.id,
                    r.score
                );
            }
        }
        report.push(format!("{n} records ({tied_pairs} tied neighbours)"));
    }
    Ok(report.join(", "))
}

fn c6_topk_curve() -> Outcome {
    let mut rng = common::rng(106);
    let sizes = [1, 8, 32, 64, 512];
    for n in 0..1000 {
        let c = sizes[n % sizes.len()];
        let a: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = PooledEmbedding::new(a, PoolingMode::Avg, (1, 1)).unwrap();
        let b = PooledEmbedding::new(b, PoolingMode::Avg, (1, 1)).unwrap();
        let curve = top_k_contribution_curve(&a, &b).map_err(|e| format!("pair {n}: {e}"))?;
        ensure!(curve.len() == c, "pair {n}: curve length {}", curve.len());
        ensure!(
            curve.windows(2).all(|w| w[0] <= w[1]),
            "pair {n}: curve decreases"
        );
        ensure!(
            (curve[c - 1] - 1.0).abs() <= 1e-9,
            "pair {n}: ends at {}",
            curve[c - 1]
        );
    }
    let mut largest_top10: f64 = 0.0;
    for n in 0..200 {
        let a: Vec<f64> = (0..512).map(|_| rng.random_range(0.01..1.0)).collect();
        let b: Vec<f64> = (0..512).map(|_| rng.random_range(0.01..1.0)).collect();
        let a = PooledEmbedding::new(a, PoolingMode::Max, (7, 7)).unwrap();
        let b = PooledEmbedding::new(b, PoolingMode::Max, (7, 7)).unwrap();
        let top10 = top_k_contribution_curve(&a, &b).map_err(|e| e.to_string())?[9];
        ensure!(top10 < 1.0, "C=512 pair {n}: top-10 fraction {top10}");
        largest_top10 = largest_top10.max(top10);
    }
    Ok(format!(
        "1000 curves monotone and ending at 1; C=512 top-10 fraction at most {largest_top10:.4}"
    ))
}

fn c7_class_map_linearity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sizes: Vec<usize> = (2..=10).collect();
    let mut checked = 0;
    for mode in [PoolingMode::Avg, PoolingMode::Max] {
        let index = toy_index(&dir.path().join(mode.to_string()), &sizes, 0, 107, mode);
        for q in index.records() {
            let members = index.class_members(&q.id).map_err(|e| e.to_string())?;
            let mut expected = vec![0.0; q.activation.grid_h() * q.activation.grid_w()];
            for m in &members {
                let pair = decompose(&q.activation, &q.embedding, &m.embedding, mode)
                    .map_err(|e| e.to_string())?;
                for (e, v) in expected.iter_mut().zip(pair.cells()) {
                    *e += v;
                }
            }
            let embeddings: Vec<&PooledEmbedding> = members.iter().map(|m| &m.embedding).collect();
            let direct = class_map(&q.activation, &q.embedding, &embeddings, mode)
                .map_err(|e| e.to_string())?;
            let via_index = index.class_map(&q.id).map_err(|e| e.to_string())?;
            ensure!(
                direct.cells() == expected.as_slice(),
                "{} ({mode}): class map differs",
                q.id
            );
            ensure!(
                via_index == direct,
                "{} ({mode}): index class map differs",
                q.id
            );
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} class maps over classes of size 2 to 10, bit-exact"
    ))
}

fn valid_array(a: &ArrayFile) -> bool {
    let n: usize = a.shape().iter().product();
    let values = a.to_f64_vec();
    matches!(a.shape().len(), 1 | 3)
        && n == values.len()
        && n > 0
        && values.iter().all(|v| v.is_finite())
}

fn same_bits(a: &ArrayFile, b: &ArrayFile) -> bool {
    a.shape() == b.shape()
        && match (a.data(), b.data()) {
            (ArrayData::F32(x), ArrayData::F32(y)) => x
                .iter()
                .map(|v| v.to_bits())
                .eq(y.iter().map(|v| v.to_bits())),
            (ArrayData::F64(x), ArrayData::F64(y)) => x
                .iter()
                .map(|v| v.to_bits())
                .eq(y.iter().map(|v| v.to_bits())),
            _ => false,
        }
}

fn random_array(rng: &mut ChaCha8Rng) -> ArrayFile {
    let shape = if rng.random_bool(0.5) {
        vec![rng.random_range(1..200)]
    } else {
        vec![
            rng.random_range(1..10),
            rng.random_range(1..10),
            rng.random_range(1..70),
        ]
    };
    let n: usize = shape.iter().product();
    let scale = 10f64.powi(rng.random_range(-30..30));
    if rng.random_bool(0.5) {
        ArrayFile::from_f64(
            shape,
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0) * scale)
                .collect(),
        )
        .unwrap()
    } else {
        ArrayFile::from_f32(
            shape,
            (0..n)
                .map(|_| rng.random_range(-1.0f32..1.0) * 1e3)
                .collect(),
        )
        .unwrap()
    }
}

const HEADER_TOKENS: &[&str] = &[
    "'<f8'",
    "'<f4'",
    "'>f8'",
    "'<i4'",
    "'|u1'",
    "'<f2'",
    "'f8'",
    "True",
    "False",
    "0",
    "()",
    "(3,)",
    "(0,)",
    "(2, 3)",
    "(1, 1, 1)",
    "(2,3,4,5)",
    "(-1,)",
    "(99999999999999999999,)",
    "'descr'",
    "'shape'",
    "'fortran_order'",
    "'extra'",
    "{",
    "}",
    ":",
    ",",
    "'",
    "\"",
    " ",
    "\n",
    "\\x00",
];

fn mutate(rng: &mut ChaCha8Rng, bytes: &mut Vec<u8>) {
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .map_or(bytes.len(), |p| p + 1);
    match rng.random_range(0..6) {
        0 => {
            for _ in 0..rng.random_range(1..5) {
                let i = rng.random_range(0..header_end);
                bytes[i] = rng.random();
            }
        }
        1 => bytes.truncate(rng.random_range(0..bytes.len())),
        2 => {
            let text = String::from_utf8_lossy(&bytes[10..header_end]).into_owned();
            let token = HEADER_TOKENS[rng.random_range(0..HEADER_TOKENS.len())];
            let at = rng.random_range(0..text.len());
            let len = rng.random_range(0..(text.len() - at).min(12));
            let mut mutated = text.clone();
            mutated.replace_range(at..at + len, token);
            let mut out = bytes[..8].to_vec();
            out.extend((mutated.len() as u16).to_le_bytes());
            out.extend(mutated.as_bytes());
            out.extend(&bytes[header_end..]);
            *bytes = out;
        }
        3 => {
            let at = rng.random_range(0..header_end);
            let junk: Vec<u8> = (0..rng.random_range(1..8)).map(|_| rng.random()).collect();
            bytes.splice(at..at, junk);
        }
        4 => {
            bytes[6] = rng.random_range(0..4);
            bytes[7] = rng.random_range(0..3);
        }
        _ => {
            let len: u16 = rng.random();
            bytes[8..10].copy_from_slice(&len.to_le_bytes());
        }
    }
}

fn c8_format_round_trips() -> Outcome {
    let mut rng = common::rng(108);
    let mut bases = Vec::new();
    for n in 0..100 {
        let a = random_array(&mut rng);
        let bytes = write_array(&a);
        let back = read_array(&bytes).map_err(|e| format!("array {n}: {e}"))?;
        ensure!(same_bits(&a, &back), "array {n} changed in a round trip");
        ensure!(
            write_array(&back) == bytes,
            "array {n} re-serializes differently"
        );
        bases.push(bytes);
    }
    let (mut ok, mut rejected) = (0, 0);
    for n in 0..12_000 {
        let mut bytes = bases[n % bases.len()].clone();
        mutate(&mut rng, &mut bytes);
        match catch_unwind(|| read_array(&bytes)) {
            Err(_) => return Err(format!("parser panicked on mutation {n}")),
            Ok(Ok(a)) => {
                ensure!(
                    valid_array(&a),
                    "mutation {n} produced an invalid array {:?}",
                    a.shape()
                );
                ok += 1;
            }
            Ok(Err(_)) => rejected += 1,
        }
    }
    Ok(format!("100 arrays bit-exact; 12000 mutated headers: {rejected} rejected, {ok} parsed as valid arrays"))
}

fn simviz() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simviz"))
}

fn run_bin(args: &[&str]) -> Result<String, String> {
    let out = simviz().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "simviz {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn snapshot(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(&path, out);
        } else {
            out.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let raw = common::toy_images(dir.path(), 8, 3, 109);
    let work = dir.path().join("work");
    let p = |s: &str| work.join(s).to_str().unwrap().to_string();
    let mut runs = Vec::new();
    for _ in 0..2 {
        if work.exists() {
            std::fs::remove_dir_all(&work).unwrap();
        }
        run_bin(&[
            "extract",
            "--images",
            raw.to_str().unwrap(),
            "--out",
            &p("data"),
            "--seed",
            "9",
        ])?;
        for mode in ["avg", "max"] {
            let idx = p(&format!("idx_{mode}"));
            run_bin(&[
                "ingest",
                "--manifest",
                &p("data/dataset.manifest"),
                "--mode",
                mode,
                "--out",
                &idx,
            ])?;
            run_bin(&[
                "pair",
                "--index",
                &idx,
                "--i",
                "img000",
                "--j",
                "img004",
                "--mode",
                mode,
                "--out-dir",
                &p(&format!("pair_{mode}")),
            ])?;
        }
        let mut files = BTreeMap::new();
        snapshot(&work, &mut files);
        runs.push(files);
    }
    let pngs = runs[0]
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .count();
    ensure!(
        runs[0].keys().eq(runs[1].keys()),
        "runs produced different file sets"
    );
    for (path, bytes) in &runs[0] {
        ensure!(
            &runs[1][path] == bytes,
            "{} differs between runs",
            path.display()
        );
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs, {pngs} of them PNG",
        runs[0].len()
    ))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn c10_cross_interface() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let raw = common::toy_images(dir.path(), 24, 4, 110);
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    run_bin(&[
        "extract",
        "--images",
        raw.to_str().unwrap(),
        "--out",
        &p("data"),
        "--seed",
        "10",
    ])?;
    run_bin(&[
        "ingest",
        "--manifest",
        &p("data/dataset.manifest"),
        "--mode",
        "max",
        "--out",
        &p("idx"),
    ])?;
    let index = EmbeddingIndex::load(Path::new(&p("idx"))).map_err(|e| e.to_string())?;
    let ids: Vec<String> = index.records().iter().map(|r| r.id.clone()).collect();

    let mut child = simviz()
        .args(["serve", "--index", &p("idx"), "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout)
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected serve banner {line:?}"))?
        .to_string();
    let http = reqwest::blocking::Client::new();
    let get = |path: &str| -> Result<Vec<u8>, String> {
        let resp = http
            .get(format!("{base}{path}"))
            .send()
            .map_err(|e| e.to_string())?;
        ensure!(resp.status().is_success(), "GET {path}: {}", resp.status());
        Ok(resp.bytes().map_err(|e| e.to_string())?.to_vec())
    };

    let mut rng = common::rng(110);
    let mut values = 0;
    for t in 0..20 {
        let q = &ids[rng.random_range(0..ids.len())];
        let c = loop {
            let c = &ids[rng.random_range(0..ids.len())];
            if c != q {
                break c;
            }
        };
        let (x0, y0) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        let (x1, y1) = (
            rng.random_range(x0 + 0.1..=1.0),
            rng.random_range(y0 + 0.1..=1.0),
        );
        let region = if t % 5 == 0 {
            [0.0, 0.0, 1.0, 1.0]
        } else {
            [x0, y0, x1, y1]
        };
        let region_arg = region.map(|v| v.to_string()).join(",");
        let k = ids.len() - 1;

        // search: HTTP body vs CLI json-lines
        let body = serde_json::json!({
            "query_id": q, "k": k,
            "region": {"x0": region[0], "y0": region[1], "x1": region[2], "y1": region[3]},
        });
        let resp = http
            .post(format!("{base}/api/search"))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| e.to_string())?;
        ensure!(resp.status().is_success(), "search {t}: {}", resp.status());
        let hits: Vec<serde_json::Value> =
            serde_json::from_slice(&resp.bytes().map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let cli = run_bin(&[
            "search",
            "--index",
            &p("idx"),
            "--query",
            q,
            "--k",
            &k.to_string(),
            "--region",
            &region_arg,
            "--format",
            "json-lines",
        ])?;
        let records: Vec<serde_json::Value> = cli
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        ensure!(
            hits.len() == records.len(),
            "triple {t}: {} HTTP hits vs {} CLI records",
            hits.len(),
            records.len()
        );
        for (h, r) in hits.iter().zip(&records) {
            for field in ["rank", "id", "class_label"] {
                ensure!(
                    h[field] == r[field],
                    "triple {t}: {field} {} vs {}",
                    h[field],
                    r[field]
                );
            }
            let (hs, rs) = (h["score"].as_f64().unwrap(), r["score"].as_f64().unwrap());
            ensure!(sig9(hs) == sig9(rs), "triple {t}: score {hs} vs {rs}");
            values += 1;
        }
        ensure!(
            hits.iter().any(|h| h["id"] == c.as_str()),
            "triple {t}: candidate {c} missing"
        );

        // pair maps: HTTP json and png vs CLI pair outputs
        let out_dir = p(&format!("pair{t}"));
        let printed = run_bin(&[
            "pair",
            "--index",
            &p("idx"),
            "--i",
            q,
            "--j",
            c,
            "--mode",
            "max",
            "--out-dir",
            &out_dir,
        ])?;
        let similarity: f64 = printed
            .trim()
            .strip_prefix("similarity=")
            .ok_or("no similarity line")?
            .parse()
            .map_err(|e| format!("{e}"))?;
        for (direction, over, other) in [("i", q, c), ("j", c, q)] {
            let stem = format!("{over}_to_{other}");
            let map: serde_json::Value = serde_json::from_slice(&get(&format!(
                "/api/map?i={q}&j={c}&direction={direction}&render=json"
            ))?)
            .map_err(|e| e.to_string())?;
            let cli_cells =
                read_array_file(Path::new(&out_dir).join(format!("{stem}.npy")).as_path())
                    .map_err(|e| e.to_string())?
                    .to_f64_vec();
            let http_cells: Vec<f64> = map["cells"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            ensure!(
                http_cells.len() == cli_cells.len(),
                "triple {t}: map sizes differ"
            );
            for (a, b) in http_cells.iter().zip(&cli_cells) {
                ensure!(sig9(*a) == sig9(*b), "triple {t} {stem}: cell {a} vs {b}");
                values += 1;
            }
            let total = map["total"].as_f64().unwrap();
            ensure!(
                format!("{total:.9}") == format!("{similarity:.9}"),
                "triple {t}: total {total} vs {similarity}"
            );
            let png = get(&format!(
                "/api/map?i={q}&j={c}&direction={direction}&render=png"
            ))?;
            let cli_png = std::fs::read(Path::new(&out_dir).join(format!("{stem}.png")))
                .map_err(|e| e.to_string())?;
            ensure!(png == cli_png, "triple {t} {stem}: PNG overlays differ");
            values += 1;

            let region = Region::new(region[0], region[1], region[2], region[3]).unwrap();
            let cli_map = simviz_core::SimilarityMap::from_cells(
                map["grid_h"].as_u64().unwrap() as usize,
                map["grid_w"].as_u64().unwrap() as usize,
                cli_cells,
                PoolingMode::Max,
                simviz_core::Direction::Forward,
            )
            .unwrap();
            if direction == "i" {
                let score = hits.iter().find(|h| h["id"] == c.as_str()).unwrap()["score"]
                    .as_f64()
                    .unwrap();
                let from_cli_map = if region.is_full() {
                    similarity
                } else {
                    region_score(&cli_map, &region)
                };
                ensure!(
                    format!("{score:.9}") == format!("{from_cli_map:.9}"),
                    "triple {t}: region score {score} vs {from_cli_map}"
                );
                values += 1;
            }
        }
    }
    drop(server);
    Ok(format!(
        "20 triples, {values} values and overlays equal across HTTP and CLI"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("decomposition identity", c1_decomposition_identity),
        ("surrogate correctness", c2_surrogate),
        ("region additivity", c3_region_additivity),
        ("full-region equivalence", c4_full_region_equivalence),
        ("retrieval oracle", c5_retrieval_oracle),
        ("top-k contribution curve", c6_topk_curve),
        ("class-map linearity", c7_class_map_linearity),
        ("format round-trips", c8_format_round_trips),
        ("end-to-end determinism", c9_determinism),
        ("cross-interface consistency", c10_cross_interface),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.1}s)", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.1}s)", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
