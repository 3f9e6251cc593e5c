//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use waon_core::{
    merge_snapshots, recall_at_1, summarize, top1_accuracy, ClassificationEval, Deduplicator, HtmlDoc, KeyKind,
    RetrievalDirection, RetrievalEval, Stage,
};

use crate::config::{Config, ConfigLoadError};
use crate::emb::{parse_labels, Embeddings};
use crate::manifest::{histogram_svg, Manifest};
use crate::pipeline::{self, Layout, PipelineError, RunOptions};
use crate::records::{read_json, read_jsonl, write_json, write_jsonl, BlobStore, PairRecord};
use crate::shards::{read_shards, ShardWriter};

/// Exit status for a configuration that fails to parse or validate.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for a fatal stage error.
pub const EXIT_FATAL: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "waon", version, about = "Build Japanese image-text pair datasets from WARC files")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `run.snapshot_id`.
    #[arg(long, global = true)]
    snapshot: Option<String>,
    /// Override `run.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Score with the deterministic mock instead of the sidecar.
    #[arg(long, global = true)]
    mock_scorer: bool,
    /// Fetch images from `run.offline_root` instead of the network.
    #[arg(long, global = true)]
    offline: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage, or the single stage named by --stage.
    Run {
        /// Stage subcommand to run alone (e.g. `dedup`).
        #[arg(long)]
        stage: Option<String>,
    },
    /// WARC inputs to docs.jsonl.
    Ingest,
    /// docs.jsonl to pairs.jsonl through the language gate.
    Pairs,
    /// pairs.jsonl to deduped.jsonl against the persisted URL and caption filters.
    Dedup,
    /// deduped.jsonl to fetched.jsonl, storing image blobs.
    Fetch,
    /// fetched.jsonl to images.jsonl through the quality gate.
    FilterImages,
    /// images.jsonl to scored.jsonl.
    Score,
    /// scored.jsonl to filtered.jsonl: NSFW, pHash dedup, alignment.
    FilterScores,
    /// filtered.jsonl to shards and the manifest.
    Shard,
    /// Cross-snapshot dedup of finished outputs, newest first.
    MergeSnapshots {
        /// Shard directories or JSONL record files, newest first.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write surviving records here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Zero-shot metrics over EMB1 embedding containers.
    Eval {
        /// Image embeddings.
        #[arg(long)]
        images: PathBuf,
        /// Caption embeddings (retrieval) or class-prompt embeddings (classification).
        #[arg(long)]
        texts: PathBuf,
        /// Class labels, one per line; switches to classification.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Render a manifest's alignment histogram as SVG.
    PlotHist {
        /// Manifest to read; defaults to the output directory's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// SVG destination; defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the reference config with every default.
    InitConfig,
}

const STAGES: [&str; 8] = ["ingest", "pairs", "dedup", "fetch", "filter-images", "score", "filter-scores", "shard"];

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigLoadError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Other(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Config(e)) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FATAL
        }
    }
}

fn load_config(g: &Global) -> Result<Config, ConfigLoadError> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = &g.snapshot {
        cfg.run.snapshot_id = s.clone();
    }
    if let Some(o) = &g.out {
        cfg.run.out_dir = o.clone();
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(ConfigLoadError::Invalid(errors));
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let opts = RunOptions { mock_scorer: g.mock_scorer, offline: g.offline };
    match cli.command {
        Command::InitConfig => {
            print!("{}", Config::reference_toml());
            Ok(())
        }
        Command::Eval { images, texts, labels } => eval(&images, &texts, labels.as_deref()),
        Command::MergeSnapshots { inputs, output } => {
            let cfg = load_config(g)?;
            merge(&inputs, output.as_deref(), &cfg)
        }
        Command::PlotHist { manifest, output } => {
            let path = match manifest {
                Some(p) => p,
                None => Layout::new(&load_config(g)?.run.out_dir).manifest(),
            };
            plot(&path, output.as_deref())
        }
        Command::Run { stage: None } => {
            let cfg = load_config(g)?;
            let out = pipeline::run_pipeline(&cfg, opts, &mut |s| log::info!("stage {s}"))?;
            print_summary(&out.manifest);
            Ok(())
        }
        Command::Run { stage: Some(name) } => {
            if !STAGES.contains(&name.as_str()) {
                return Err(CliError::Other(format!("unknown stage `{name}`; expected one of {}", STAGES.join(", "))));
            }
            stage(&name, &load_config(g)?, opts)
        }
        Command::Ingest => stage("ingest", &load_config(g)?, opts),
        Command::Pairs => stage("pairs", &load_config(g)?, opts),
        Command::Dedup => stage("dedup", &load_config(g)?, opts),
        Command::Fetch => stage("fetch", &load_config(g)?, opts),
        Command::FilterImages => stage("filter-images", &load_config(g)?, opts),
        Command::Score => stage("score", &load_config(g)?, opts),
        Command::FilterScores => stage("filter-scores", &load_config(g)?, opts),
        Command::Shard => stage("shard", &load_config(g)?, opts),
    }
}

fn print_summary(m: &Manifest) {
    for s in m.stages.stages() {
        println!("{:<20} in {:>10}  out {:>10}", s.stage.as_str(), s.input_count, s.output_count);
    }
    println!("final {}", m.final_count);
}

fn read_records(path: &Path) -> Result<Vec<PairRecord>, CliError> {
    read_jsonl(path).map_err(|e| CliError::Other(format!("{}: {e} (run the previous stage first)", path.display())))
}

/// Runs one stage over the work directory, replacing that stage's counters.
fn stage(name: &str, cfg: &Config, opts: RunOptions) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.run.out_dir);
    fs::create_dir_all(layout.root())?;
    let mut ledger = pipeline::load_ledger(&layout)?;
    let stages: &[Stage] = match name {
        "ingest" => &[Stage::Ingest],
        "pairs" => &[Stage::DocGate, Stage::PairExtract],
        "dedup" => &[Stage::DedupUrlCaption],
        "fetch" => &[Stage::Fetch],
        "filter-images" => &[Stage::QualityGate],
        "score" => &[],
        "filter-scores" => &[Stage::NsfwFilter, Stage::PhashDedup, Stage::AlignmentFilter],
        _ => &[Stage::ShardWrite],
    };
    for s in stages {
        ledger.reset(*s).map_err(PipelineError::from)?;
    }
    match name {
        "ingest" => {
            let mut out = BufWriter::new(File::create(layout.docs())?);
            for source in pipeline::warc_sources(cfg)? {
                pipeline::ingest(&source, cfg.ingest.max_record_bytes, &cfg.fetch.user_agent, &mut ledger, |doc, _| {
                    serde_json::to_writer(&mut out, &doc).map_err(|e| PipelineError::Input(e.to_string()))?;
                    out.write_all(b"\n").map_err(|e| PipelineError::Input(e.to_string()))
                })?;
            }
            out.flush()?;
        }
        "pairs" => {
            let input = BufReader::new(File::open(layout.docs()).map_err(|e| CliError::Other(format!("{}: {e}", layout.docs().display())))?);
            let mut out = BufWriter::new(File::create(layout.pairs())?);
            for line in input.lines() {
                let doc: HtmlDoc = serde_json::from_str(&line?).map_err(|e| CliError::Other(format!("docs.jsonl: {e}")))?;
                for r in pipeline::gate_and_extract(&doc, &cfg.doc_gate, &cfg.run.snapshot_id, &mut ledger).map_err(PipelineError::from)? {
                    serde_json::to_writer(&mut out, &r).map_err(|e| CliError::Other(e.to_string()))?;
                    out.write_all(b"\n")?;
                }
            }
            out.flush()?;
        }
        "dedup" => {
            let records = read_records(&layout.pairs())?;
            let mut dedup = pipeline::load_filters(&layout.state(), &[KeyKind::ImageUrl, KeyKind::Caption], &cfg.dedup)?;
            let mut kept = Vec::new();
            for r in records {
                if pipeline::dedup_one(&r, &mut dedup, Stage::DedupUrlCaption, &mut ledger).map_err(PipelineError::from)? {
                    kept.push(r);
                }
            }
            pipeline::save_filters(&layout.state(), &dedup)?;
            write_jsonl(&layout.deduped(), &kept)?;
        }
        "fetch" => {
            let records = read_records(&layout.deduped())?;
            let fetcher = pipeline::make_fetcher(cfg, opts.offline)?;
            let rt = tokio::runtime::Runtime::new()?;
            let blobs = BlobStore::open(layout.blobs())?;
            let items = pipeline::fetch_stage(&rt, &fetcher, records, &cfg.fetch, &blobs, &mut ledger)?;
            write_jsonl(&layout.fetched(), items.iter().map(|(r, _)| r))?;
        }
        "filter-images" => {
            let blobs = BlobStore::open(layout.blobs())?;
            let items = with_blobs(read_records(&layout.fetched())?, &blobs)?;
            let kept = pipeline::quality_stage(items, &cfg.filters, &mut ledger).map_err(PipelineError::from)?;
            write_jsonl(&layout.images(), kept.iter().map(|(r, _)| r))?;
        }
        "score" => {
            let blobs = BlobStore::open(layout.blobs())?;
            let mut items = with_blobs(read_records(&layout.images())?, &blobs)?;
            let mut scorer = pipeline::make_scorer(cfg, opts.mock_scorer)?;
            for chunk in items.chunks_mut(cfg.run.batch_size) {
                pipeline::score_stage(chunk, &mut scorer).map_err(PipelineError::from)?;
            }
            write_jsonl(&layout.scored(), items.iter().map(|(r, _)| r))?;
            fs::write(layout.file("scorer.txt"), scorer.name())?;
        }
        "filter-scores" => {
            let items: Vec<(PairRecord, ())> = read_records(&layout.scored())?.into_iter().map(|r| (r, ())).collect();
            let items = pipeline::nsfw_stage(items, &cfg.filters, &mut ledger)?;
            let mut dedup = Deduplicator::new(&[KeyKind::Phash], &cfg.dedup).map_err(PipelineError::from)?;
            let items = pipeline::phash_stage(items, &mut dedup, &mut ledger)?;
            let mut hist = waon_core::AlignmentHistogram::default();
            let items = pipeline::alignment_stage(items, &cfg.filters, &mut hist, &mut ledger)?;
            write_json(&layout.histogram(), &hist)?;
            write_jsonl(&layout.filtered(), items.iter().map(|(r, _)| r))?;
        }
        _ => {
            let blobs = BlobStore::open(layout.blobs())?;
            let items = with_blobs(read_records(&layout.filtered())?, &blobs)?;
            let shard_dir = layout.shards();
            if shard_dir.exists() {
                fs::remove_dir_all(&shard_dir)?;
            }
            let mut writer = ShardWriter::new(&shard_dir, cfg.output.shard_size)?;
            pipeline::shard_stage(&items, &mut writer, &mut ledger)?;
            let index = writer.finish()?;
            pipeline::save_ledger(&layout, &ledger)?;
            let scorer = fs::read_to_string(layout.file("scorer.txt")).unwrap_or_default();
            let manifest = pipeline::stagewise_manifest(cfg, &layout, scorer.trim())?;
            if manifest.final_count != index.total {
                return Err(CliError::Other(format!("ledger counts {} pairs but shards hold {}", manifest.final_count, index.total)));
            }
            fs::write(layout.manifest(), manifest.to_json())?;
            print_summary(&manifest);
            return Ok(());
        }
    }
    pipeline::save_ledger(&layout, &ledger)?;
    for s in stages {
        if let Some(st) = ledger.get(*s) {
            println!("{:<20} in {:>10}  out {:>10}", s.as_str(), st.input_count, st.output_count);
        }
    }
    Ok(())
}

fn with_blobs(records: Vec<PairRecord>, blobs: &BlobStore) -> Result<Vec<(PairRecord, Vec<u8>)>, CliError> {
    records
        .into_iter()
        .map(|r| {
            let digest = r.image_digest.clone().ok_or_else(|| CliError::Other(format!("{} has no image digest", r.image_url)))?;
            let bytes = blobs.get(&digest)?;
            Ok((r, bytes))
        })
        .collect()
}

fn load_snapshot(path: &Path) -> Result<(String, Vec<PairRecord>), CliError> {
    let records: Vec<PairRecord> = if path.join("index.json").exists() {
        read_shards(path)?.iter().map(PairRecord::from).collect()
    } else if path.join("shards").join("index.json").exists() {
        read_shards(&path.join("shards"))?.iter().map(PairRecord::from).collect()
    } else {
        read_records(path)?
    };
    let id = records
        .first()
        .map(|r| r.snapshot_id.clone())
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    Ok((id, records))
}

fn merge(inputs: &[PathBuf], output: Option<&Path>, cfg: &Config) -> Result<(), CliError> {
    let snapshots = inputs.iter().map(|p| load_snapshot(p)).collect::<Result<Vec<_>, _>>()?;
    let (survivors, report) = merge_snapshots(snapshots, &cfg.dedup).map_err(|e| CliError::Other(e.to_string()))?;
    for s in &report.snapshots {
        println!("{:<12} {:>14} -> {:>14}", s.snapshot_id, waon_core::stats::group_thousands(s.input), waon_core::stats::group_thousands(s.survivors));
    }
    let summary = summarize(report.snapshots.iter().map(|s| (s.snapshot_id.as_str(), s.survivors)));
    println!("{summary}");
    if let Some(out) = output {
        write_jsonl(out, &survivors)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ClassificationMetrics {
    task: &'static str,
    n: usize,
    top1_accuracy: f64,
}

#[derive(Serialize)]
struct RetrievalMetrics {
    task: &'static str,
    n: usize,
    image_to_text_recall_at_1: f64,
    text_to_image_recall_at_1: f64,
}

fn eval(images: &Path, texts: &Path, labels: Option<&Path>) -> Result<(), CliError> {
    let img = Embeddings::read(images)?;
    let txt = Embeddings::read(texts)?;
    if img.dim != txt.dim {
        return Err(CliError::Other(format!("embedding widths differ: {} vs {}", img.dim, txt.dim)));
    }
    let json = match labels {
        Some(path) => {
            let labels = parse_labels(&fs::read_to_string(path)?)?;
            let n = img.rows;
            let e = ClassificationEval::new(img.data, txt.data, labels, img.dim).map_err(|e| CliError::Other(e.to_string()))?;
            serde_json::to_string(&ClassificationMetrics { task: "classification", n, top1_accuracy: top1_accuracy(&e) })
        }
        None => {
            let n = img.rows;
            let e = RetrievalEval::new(img.data, txt.data, img.dim).map_err(|e| CliError::Other(e.to_string()))?;
            serde_json::to_string(&RetrievalMetrics {
                task: "retrieval",
                n,
                image_to_text_recall_at_1: recall_at_1(&e, RetrievalDirection::ImageToText),
                text_to_image_recall_at_1: recall_at_1(&e, RetrievalDirection::TextToImage),
            })
        }
    };
    println!("{}", json.map_err(|e| CliError::Other(e.to_string()))?);
    Ok(())
}

fn plot(manifest: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let m: Manifest = read_json(manifest).map_err(|e| CliError::Other(format!("{}: {e}", manifest.display())))?;
    let svg = histogram_svg(&m.alignment_histogram, m.filters.alignment_min, &format!("alignment scores, snapshot {}", m.snapshot_id));
    match output {
        Some(p) => fs::write(p, svg)?,
        None => print!("{svg}"),
    }
    Ok(())
}
