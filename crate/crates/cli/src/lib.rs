//! Command-line front end. Every subcommand is a thin shell over library
//! calls in `simviz_core` and `simviz_service`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use simviz_core::dataset::extract_directory;
use simviz_core::render::{render_overlay, NegativeHandling, Normalization, RenderOptions};
use simviz_core::simcore::top_k_contribution_curve;
use simviz_core::tensor_io::{
    encode_png, load_manifest, map_to_array, read_image, write_array_file,
};
use simviz_core::toyextract::{parse_grid, ExtractorConfig};
use simviz_core::{
    build_index, format_score, round_score, EmbeddingIndex, PoolingMode, RankedResult, Region,
    SimilarityMap,
};

type Error = Box<dyn std::error::Error>;

#[derive(Debug, Parser)]
#[command(
    name = "simviz",
    version,
    about = "Similarity maps and region search for pooled embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the toy extractor over a directory of images.
    Extract {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = ExtractorConfig::default().channels)]
        channels: usize,
        #[arg(long = "filter", default_value_t = ExtractorConfig::default().filter_size)]
        filter_size: usize,
        #[arg(long, value_parser = parse_grid, default_value = "7x7")]
        grid: (usize, usize),
    },
    /// Pool every activation in a manifest and save an index.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: PoolingMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write both similarity maps of a pair and their overlays.
    Pair {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        i: String,
        #[arg(long)]
        j: String,
        #[arg(long)]
        mode: PoolingMode,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = NormArg::PerMap)]
        norm: NormArg,
        #[arg(long)]
        signed: bool,
    },
    /// Write the class similarity map of one record and its overlay.
    Classmap {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Print the cumulative top-k contribution curve of a pair.
    Topk {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        i: String,
        #[arg(long)]
        j: String,
    },
    /// Rank the index against a query record.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: usize,
        #[arg(long, allow_hyphen_values = true)]
        region: Option<Region>,
        #[arg(long = "group-classes")]
        group_classes: Option<usize>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Tsv)]
        format: ReportFormat,
    },
    /// Serve the HTTP API over an index.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    #[value(name = "per_map")]
    PerMap,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Tsv,
    #[value(name = "json-lines")]
    JsonLines,
}

pub const TSV_HEADER: &str = "rank\tid\tclass_label\tscore";

#[derive(Serialize, Deserialize)]
struct ReportRecord {
    rank: usize,
    id: String,
    class_label: String,
    score: f64,
}

/// One line per result in rank order; tsv output starts with a header line.
pub fn emit_report(results: &[RankedResult], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(TSV_HEADER);
            out.push('\n');
            for r in results {
                out.push_str(&format!("{r}\n"));
            }
        }
        ReportFormat::JsonLines => {
            for r in results {
                let rec = ReportRecord {
                    rank: r.rank,
                    id: r.id.clone(),
                    class_label: r.class_label.clone(),
                    score: round_score(r.score),
                };
                out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

/// Inverse of [`emit_report`]. Scores come back at report precision.
pub fn parse_report(text: &str, format: ReportFormat) -> Result<Vec<RankedResult>, String> {
    let mut lines = text.lines();
    if format == ReportFormat::Tsv && lines.next() != Some(TSV_HEADER) {
        return Err("missing tsv header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| match format {
            ReportFormat::Tsv => {
                let f: Vec<&str> = line.split('\t').collect();
                let [rank, id, class_label, score] = f.as_slice() else {
                    return Err(format!("expected 4 fields: {line:?}"));
                };
                Ok(RankedResult {
                    rank: rank.parse().map_err(|e| format!("rank {rank:?}: {e}"))?,
                    id: id.to_string(),
                    class_label: class_label.to_string(),
                    score: score.parse().map_err(|e| format!("score {score:?}: {e}"))?,
                })
            }
            ReportFormat::JsonLines => {
                let r: ReportRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
                Ok(RankedResult {
                    rank: r.rank,
                    id: r.id,
                    class_label: r.class_label,
                    score: r.score,
                })
            }
        })
        .collect()
}

/// File stem used for the map of `over` against `other`.
pub fn pair_stem(over: &str, other: &str) -> String {
    format!("{over}_to_{other}")
}

pub fn class_stem(id: &str) -> String {
    format!("{id}_class")
}

fn write_map(
    dir: &Path,
    stem: &str,
    map: &SimilarityMap,
    index: &EmbeddingIndex,
    over: &str,
    opts: &RenderOptions,
) -> Result<(), Error> {
    write_array_file(&map_to_array(map), &dir.join(format!("{stem}.npy")))?;
    let base = read_image(&index.record(over)?.image_ref)?;
    let png = encode_png(&render_overlay(map, &base, opts)?);
    let path = dir.join(format!("{stem}.png"));
    std::fs::write(&path, png).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()).into())
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), Error> {
    match command {
        Command::Extract {
            images,
            out,
            seed,
            channels,
            filter_size,
            grid: (grid_h, grid_w),
        } => {
            let cfg = ExtractorConfig {
                seed,
                channels,
                filter_size,
                grid_h,
                grid_w,
            };
            let manifest = extract_directory(&images, &out, &cfg)?;
            writeln!(stdout, "extracted={}", manifest.entries.len())?;
        }
        Command::Ingest {
            manifest,
            mode,
            out,
        } => {
            let index = build_index(&load_manifest(&manifest)?, mode)?;
            index.save(&out)?;
            writeln!(stdout, "records={}", index.len())?;
        }
        Command::Pair {
            index,
            i,
            j,
            mode,
            out_dir,
            alpha,
            norm,
            signed,
        } => {
            let index = EmbeddingIndex::load(&index)?;
            let (forward, reverse) = index.pair_maps(&i, &j, mode)?;
            let opts = RenderOptions {
                alpha,
                normalization: match norm {
                    NormArg::PerMap => Normalization::PerMap,
                    NormArg::Shared => {
                        Normalization::Shared(forward.max_abs().max(reverse.max_abs()))
                    }
                },
                negative_handling: if signed {
                    NegativeHandling::Signed
                } else {
                    NegativeHandling::ClampToZero
                },
            };
            opts.validate()?;
            create_dir(&out_dir)?;
            write_map(&out_dir, &pair_stem(&i, &j), &forward, &index, &i, &opts)?;
            write_map(&out_dir, &pair_stem(&j, &i), &reverse, &index, &j, &opts)?;
            writeln!(stdout, "similarity={}", format_score(forward.total()))?;
        }
        Command::Classmap { index, id, out_dir } => {
            let index = EmbeddingIndex::load(&index)?;
            let map = index.class_map(&id)?;
            create_dir(&out_dir)?;
            write_map(
                &out_dir,
                &class_stem(&id),
                &map,
                &index,
                &id,
                &RenderOptions::default(),
            )?;
            writeln!(stdout, "members={}", index.class_members(&id)?.len())?;
            writeln!(stdout, "total={}", format_score(map.total()))?;
        }
        Command::Topk { index, i, j } => {
            let index = EmbeddingIndex::load(&index)?;
            let curve = top_k_contribution_curve(
                &index.record(&i)?.embedding,
                &index.record(&j)?.embedding,
            )?;
            for v in curve {
                writeln!(stdout, "{}", format_score(v))?;
            }
        }
        Command::Search {
            index,
            query,
            k,
            region,
            group_classes,
            format,
        } => {
            let index = EmbeddingIndex::load(&index)?;
            let results = simviz_core::query(&index, &query, k, region.as_ref(), group_classes)?;
            stdout.write_all(emit_report(&results, format).as_bytes())?;
        }
        Command::Serve {
            index,
            port,
            static_dir,
        } => {
            let mut ready_err = None;
            simviz_service::run(&index, port, static_dir.as_deref(), |addr| {
                if let Err(e) =
                    writeln!(stdout, "listening on http://{addr}").and_then(|_| stdout.flush())
                {
                    ready_err = Some(e);
                }
            })?;
            if let Some(e) = ready_err {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// runtime errors, which are reported as one line on `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                return 2;
            }
            let _ = stdout.write_all(text.as_bytes());
            return 0;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {line}");
            1
        }
    }
}
