//! Stage implementations and the end-to-end orchestrator.
//!
//! Document-level stages (ingest, doc gate, pair extraction, URL/caption
//! dedup) stream over the WARC inputs and spill candidates to disk. Image
//! stages then run over bounded batches of candidates, always in pipeline
//! order, so image bytes never accumulate beyond one batch.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use waon_core::{
    filter_by_alignment, filter_by_nsfw, gate, mock_scorer, phash, quality_gate, AlignmentHistogram, BloomError,
    BloomFilter, Deduplicator, FilterConfig, HtmlDoc, KeyKind, LangConfig, LangDecision, ScoreRecord, ScriptDetector, SourceFormat,
    Stage, StageLedger, StatsError,
};

use crate::config::{Config, ScorerBackend, SidecarTransport};
use crate::fetch::{fetch_all, FetchOutcome, FetchPolicy, FetchResult, Fetched, Fetcher, FileFetcher, HttpFetcher, Want};
use crate::html::{decode_record, extract_main_text};
use crate::images;
use crate::manifest::{config_fingerprint, Manifest, MANIFEST_VERSION};
use crate::pairs::extract_pairs;
use crate::records::{read_json, sha256, write_json, BlobStore, PairRecord};
use crate::shards::{ShardEntry, ShardIndex, ShardWriter};
use crate::sidecar::{HttpTransport, SidecarClient, SidecarError, StdioTransport, TcpTransport, Transport};
use crate::warc::{WarcError, WarcReader};

/// A fatal pipeline failure.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// File or network IO.
    #[error("{context}: {source}")]
    Io {
        /// What was being done.
        context: String,
        /// Cause.
        source: io::Error,
    },
    /// Unrecoverable WARC corruption.
    #[error("{path}: {source}")]
    Warc {
        /// Input being read.
        path: String,
        /// Cause.
        source: WarcError,
    },
    /// Scorer failure.
    #[error(transparent)]
    Sidecar(#[from] SidecarError),
    /// Counters do not add up.
    #[error("stage accounting: {0}")]
    Stats(#[from] StatsError),
    /// Bloom filter sizing or restore failed.
    #[error("bloom filter: {0}")]
    Bloom(#[from] BloomError),
    /// Inconsistent inputs.
    #[error("{0}")]
    Input(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// Where each stage reads and writes below an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    /// Layout rooted at `root`.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Output directory.
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of a file under the root.
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Output of `ingest`: one HTML document per line.
    pub fn docs(&self) -> PathBuf {
        self.file("docs.jsonl")
    }

    /// Output of `pairs`.
    pub fn pairs(&self) -> PathBuf {
        self.file("pairs.jsonl")
    }

    /// Output of `dedup`.
    pub fn deduped(&self) -> PathBuf {
        self.file("deduped.jsonl")
    }

    /// Output of `fetch`.
    pub fn fetched(&self) -> PathBuf {
        self.file("fetched.jsonl")
    }

    /// Output of `filter-images`.
    pub fn images(&self) -> PathBuf {
        self.file("images.jsonl")
    }

    /// Output of `score`.
    pub fn scored(&self) -> PathBuf {
        self.file("scored.jsonl")
    }

    /// Output of `filter-scores`.
    pub fn filtered(&self) -> PathBuf {
        self.file("filtered.jsonl")
    }

    /// Image blobs.
    pub fn blobs(&self) -> PathBuf {
        self.file("blobs")
    }

    /// Persisted Bloom filters.
    pub fn state(&self) -> PathBuf {
        self.file("state")
    }

    /// Shard output.
    pub fn shards(&self) -> PathBuf {
        self.file("shards")
    }

    /// Stage counters accumulated by stage-wise runs.
    pub fn ledger(&self) -> PathBuf {
        self.file("ledger.json")
    }

    /// Alignment histogram written by `filter-scores`.
    pub fn histogram(&self) -> PathBuf {
        self.file("histogram.json")
    }

    /// Final manifest.
    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }

    /// Manifest flushed when a run fails.
    pub fn partial_manifest(&self) -> PathBuf {
        self.file("manifest.partial.json")
    }
}

/// A WARC input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WarcSource {
    /// Local file.
    Path(PathBuf),
    /// Remote file fetched with a plain GET.
    Url(String),
}

impl WarcSource {
    fn label(&self) -> String {
        match self {
            WarcSource::Path(p) => p.display().to_string(),
            WarcSource::Url(u) => u.clone(),
        }
    }

    fn open(&self, user_agent: &str) -> Result<Box<dyn Read>, PipelineError> {
        match self {
            WarcSource::Path(p) => Ok(Box::new(File::open(p).map_err(io_err(format!("opening {}", p.display())))?)),
            WarcSource::Url(u) => {
                let resp = reqwest::blocking::Client::builder()
                    .user_agent(user_agent)
                    .timeout(None)
                    .build()
                    .and_then(|c| c.get(u).send())
                    .and_then(|r| r.error_for_status())
                    .map_err(|e| PipelineError::Io { context: format!("downloading {u}"), source: io::Error::other(e) })?;
                Ok(Box::new(resp))
            }
        }
    }
}

/// Local inputs followed by the URLs in `url_list`.
pub fn warc_sources(cfg: &Config) -> Result<Vec<WarcSource>, PipelineError> {
    let mut out: Vec<WarcSource> = cfg.run.inputs.iter().cloned().map(WarcSource::Path).collect();
    if let Some(list) = &cfg.run.url_list {
        let text = fs::read_to_string(list).map_err(io_err(format!("reading {}", list.display())))?;
        out.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| WarcSource::Url(l.to_string())));
    }
    Ok(out)
}

/// Streams HTML documents out of `source`, counting the ingest stage.
pub fn ingest(
    source: &WarcSource,
    max_record_bytes: u64,
    user_agent: &str,
    ledger: &mut StageLedger,
    mut on_doc: impl FnMut(HtmlDoc, &mut StageLedger) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let reader = BufReader::with_capacity(1 << 16, source.open(user_agent)?);
    let mut warc = WarcReader::with_max_record_bytes(reader, max_record_bytes);
    let mut last = warc.counters();
    loop {
        let next = warc.next();
        let now = warc.counters();
        ledger.record_rejects(Stage::Ingest, "malformed_record", now.malformed_records - last.malformed_records)?;
        ledger.record_rejects(Stage::Ingest, "oversized_record", now.oversized_records - last.oversized_records)?;
        last = now;
        let record = match next {
            None => break,
            Some(Err(source_err)) => return Err(PipelineError::Warc { path: source.label(), source: source_err }),
            Some(Ok(r)) => r,
        };
        match decode_record(&record) {
            Some(d) if !d.doc.url.is_empty() => {
                ledger.record(Stage::Ingest, true, None)?;
                if d.lossy {
                    ledger.note(Stage::Ingest, "lossy_charset", 1)?;
                }
                on_doc(d.doc, ledger)?;
            }
            Some(_) => ledger.record(Stage::Ingest, false, Some("missing_target_uri"))?,
            None => ledger.record(Stage::Ingest, false, Some("not_html_response"))?,
        }
    }
    Ok(())
}

/// Language gate with the bundled script detector.
pub fn doc_gate(doc: &HtmlDoc, cfg: &LangConfig) -> LangDecision {
    gate(doc, cfg, &ScriptDetector, extract_main_text)
}

/// Gates `doc` and extracts its candidates, counting both stages.
pub fn gate_and_extract(doc: &HtmlDoc, lang: &LangConfig, snapshot_id: &str, ledger: &mut StageLedger) -> Result<Vec<PairRecord>, StatsError> {
    let decision = doc_gate(doc, lang);
    if !decision.accepted {
        ledger.record(Stage::DocGate, false, Some(decision.method.as_str()))?;
        return Ok(Vec::new());
    }
    ledger.record(Stage::DocGate, true, None)?;
    ledger.note(Stage::DocGate, decision.method.as_str(), 1)?;
    let ex = extract_pairs(doc, snapshot_id);
    for (reason, n) in &ex.rejects {
        ledger.record_rejects(Stage::PairExtract, reason, *n)?;
    }
    for (what, n) in &ex.notes {
        ledger.note(Stage::PairExtract, what, *n)?;
    }
    for _ in &ex.candidates {
        ledger.record(Stage::PairExtract, true, None)?;
    }
    Ok(ex.candidates.into_iter().map(PairRecord::from).collect())
}

/// Admits `record` through `dedup`, counting the outcome under `stage`.
pub fn dedup_one(record: &PairRecord, dedup: &mut Deduplicator, stage: Stage, ledger: &mut StageLedger) -> Result<bool, StatsError> {
    match dedup.admit(record) {
        Ok(()) => {
            ledger.record(stage, true, None)?;
            Ok(true)
        }
        Err(kind) => {
            ledger.record(stage, false, Some(kind.reject_reason()))?;
            Ok(false)
        }
    }
}

fn filter_file(state: &Path, kind: KeyKind) -> PathBuf {
    state.join(format!("bloom-{}.blmf", kind.as_str()))
}

/// Loads persisted filters for `kinds` from `state`, creating fresh ones
/// where none exist.
pub fn load_filters(state: &Path, kinds: &[KeyKind], params: &waon_core::BloomParams) -> Result<Deduplicator, PipelineError> {
    let mut filters = std::collections::BTreeMap::new();
    for &kind in kinds {
        let path = filter_file(state, kind);
        let filter = match fs::read(&path) {
            Ok(bytes) => BloomFilter::from_bytes(&bytes)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BloomFilter::from_params(params)?,
            Err(e) => return Err(io_err(format!("reading {}", path.display()))(e)),
        };
        filters.insert(kind, filter);
    }
    Ok(Deduplicator::from_filters(filters))
}

/// Persists every filter of `dedup` under `state`.
pub fn save_filters(state: &Path, dedup: &Deduplicator) -> Result<(), PipelineError> {
    fs::create_dir_all(state).map_err(io_err(format!("creating {}", state.display())))?;
    for (kind, filter) in dedup.filters() {
        let path = filter_file(state, *kind);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, filter.to_bytes())
            .and_then(|()| fs::rename(&tmp, &path))
            .map_err(io_err(format!("writing {}", path.display())))?;
    }
    Ok(())
}

/// Either fetcher, chosen at runtime.
#[derive(Debug, Clone)]
pub enum AnyFetcher {
    /// Network.
    Http(HttpFetcher),
    /// Local directory.
    File(FileFetcher),
}

impl Fetcher for AnyFetcher {
    async fn get(&self, url: &url::Url, want: Want, max_bytes: u64) -> Fetched {
        match self {
            AnyFetcher::Http(f) => f.get(url, want, max_bytes).await,
            AnyFetcher::File(f) => f.get(url, want, max_bytes).await,
        }
    }

    fn rate_limited(&self) -> bool {
        match self {
            AnyFetcher::Http(f) => f.rate_limited(),
            AnyFetcher::File(f) => f.rate_limited(),
        }
    }
}

/// The fetcher a config asks for.
pub fn make_fetcher(cfg: &Config, offline: bool) -> Result<AnyFetcher, PipelineError> {
    if offline {
        let root = cfg
            .run
            .offline_root
            .clone()
            .ok_or_else(|| PipelineError::Input("offline mode needs run.offline_root".to_string()))?;
        return Ok(AnyFetcher::File(FileFetcher::new(root)));
    }
    HttpFetcher::new(&cfg.fetch)
        .map(AnyFetcher::Http)
        .map_err(|e| PipelineError::Io { context: "building HTTP client".to_string(), source: io::Error::other(e) })
}

/// Downloads a batch, storing image bytes in `blobs`. Returns survivors with
/// their bytes, in input order.
pub fn fetch_stage<F: Fetcher>(
    rt: &tokio::runtime::Runtime,
    fetcher: &F,
    records: Vec<PairRecord>,
    policy: &FetchPolicy,
    blobs: &BlobStore,
    ledger: &mut StageLedger,
) -> Result<Vec<(PairRecord, Vec<u8>)>, PipelineError> {
    let candidates = records.iter().map(waon_core::PairCandidate::from).collect();
    let results: Vec<FetchResult> = rt.block_on(fetch_all(fetcher, candidates, policy));
    let mut out = Vec::new();
    for (mut record, result) in records.into_iter().zip(results) {
        match (result.outcome, result.bytes) {
            (FetchOutcome::Ok, Some(bytes)) => {
                ledger.record(Stage::Fetch, true, None)?;
                record.image_digest = Some(blobs.put(&bytes).map_err(io_err("storing image blob"))?);
                out.push((record, bytes));
            }
            (outcome, _) => ledger.record(Stage::Fetch, false, Some(outcome.as_str()))?,
        }
    }
    Ok(out)
}

/// Decodes and gates images; survivors gain dimensions, format and pHash.
pub fn quality_stage(items: Vec<(PairRecord, Vec<u8>)>, cfg: &FilterConfig, ledger: &mut StageLedger) -> Result<Vec<(PairRecord, Vec<u8>)>, StatsError> {
    let mut out = Vec::with_capacity(items.len());
    for (mut record, bytes) in items {
        let img = match images::decode(&bytes) {
            Ok(img) => img,
            Err(e) => {
                log::debug!("{}: {e}", record.image_url);
                ledger.record(Stage::QualityGate, false, Some("decode_failed"))?;
                continue;
            }
        };
        if let Err(reason) = quality_gate(&img, cfg) {
            ledger.record(Stage::QualityGate, false, Some(reason.as_str()))?;
            continue;
        }
        ledger.record(Stage::QualityGate, true, None)?;
        record.width = Some(img.width());
        record.height = Some(img.height());
        record.image_ext = Some(extension(img.source_format()).to_string());
        record.phash_hex = Some(phash(&img).to_string());
        out.push((record, bytes));
    }
    Ok(out)
}

fn extension(f: SourceFormat) -> &'static str {
    match f {
        SourceFormat::Jpeg => "jpg",
        SourceFormat::Png => "png",
        SourceFormat::Webp => "webp",
        SourceFormat::GifFirstFrame => "gif",
        SourceFormat::Other => "bin",
    }
}

/// NSFW and alignment scorer.
pub enum Scorer {
    /// Hash-based scores.
    Mock,
    /// External sidecar.
    Sidecar(SidecarClient),
}

impl Scorer {
    /// Name recorded in the manifest.
    pub fn name(&self) -> String {
        match self {
            Scorer::Mock => "mock".to_string(),
            Scorer::Sidecar(c) => format!("sidecar:{}", c.hello().model),
        }
    }

    /// One record per (image bytes, caption), index-aligned.
    pub fn score<B: AsRef<[u8]> + Sync>(&mut self, items: &[(B, String)]) -> Result<Vec<ScoreRecord>, SidecarError> {
        match self {
            Scorer::Mock => Ok(items.iter().map(|(b, c)| mock_scorer(&sha256(b.as_ref()), c)).collect()),
            Scorer::Sidecar(client) => {
                if items.is_empty() {
                    return Ok(Vec::new());
                }
                client.score(items)
            }
        }
    }
}

/// Scorer selected by `cfg`, or the mock when `mock` is set.
pub fn make_scorer(cfg: &Config, mock: bool) -> Result<Scorer, PipelineError> {
    if mock || cfg.scoring.backend == ScorerBackend::Mock {
        return Ok(Scorer::Mock);
    }
    let s = &cfg.scoring;
    let timeout = std::time::Duration::from_millis(s.timeout_ms);
    let mut transports: Vec<Box<dyn Transport>> = Vec::new();
    for _ in 0..s.connections {
        let t: Box<dyn Transport> = match s.transport {
            SidecarTransport::Tcp => Box::new(TcpTransport::connect(&s.endpoint, timeout).map_err(io_err(format!("connecting to {}", s.endpoint)))?),
            SidecarTransport::Http => Box::new(HttpTransport::new(&s.endpoint, timeout).map_err(io_err("building HTTP client"))?),
            SidecarTransport::Stdio => {
                let (program, args) = s.command.split_first().ok_or_else(|| PipelineError::Input("scoring.command is empty".to_string()))?;
                Box::new(StdioTransport::spawn(program, args).map_err(io_err(format!("starting {program}")))?)
            }
        };
        transports.push(t);
    }
    Ok(Scorer::Sidecar(SidecarClient::connect(transports)?))
}

/// Attaches scores to every item.
pub fn score_stage<B: AsRef<[u8]> + Sync>(items: &mut [(PairRecord, B)], scorer: &mut Scorer) -> Result<(), SidecarError> {
    let inputs: Vec<(&[u8], String)> = items.iter().map(|(r, b)| (b.as_ref(), r.caption.clone())).collect();
    let scores = scorer.score(&inputs)?;
    for ((record, _), s) in items.iter_mut().zip(scores) {
        record.nsfw = Some(s.nsfw);
        record.align = Some(s.alignment);
    }
    Ok(())
}

type Scored<T> = ((PairRecord, T), ScoreRecord);

fn with_scores<T>(items: Vec<(PairRecord, T)>) -> Result<Vec<Scored<T>>, PipelineError> {
    items
        .into_iter()
        .map(|(r, t)| {
            let s = r.scores().ok_or_else(|| PipelineError::Input(format!("{} has no scores", r.image_url)))?;
            Ok(((r, t), s))
        })
        .collect()
}

/// Drops items whose NSFW score exceeds the threshold.
pub fn nsfw_stage<T>(items: Vec<(PairRecord, T)>, cfg: &FilterConfig, ledger: &mut StageLedger) -> Result<Vec<(PairRecord, T)>, PipelineError> {
    let n = items.len() as u64;
    let kept: Vec<_> = filter_by_nsfw(with_scores(items)?, cfg).into_iter().map(|(x, _)| x).collect();
    record_filter(ledger, Stage::NsfwFilter, n, kept.len() as u64, "nsfw_exceeded")?;
    Ok(kept)
}

/// Drops items whose pHash was seen before.
pub fn phash_stage<T>(items: Vec<(PairRecord, T)>, dedup: &mut Deduplicator, ledger: &mut StageLedger) -> Result<Vec<(PairRecord, T)>, PipelineError> {
    let mut out = Vec::with_capacity(items.len());
    for (record, t) in items {
        if record.phash().is_none() {
            return Err(PipelineError::Input(format!("{} has no pHash", record.image_url)));
        }
        if dedup_one(&record, dedup, Stage::PhashDedup, ledger)? {
            out.push((record, t));
        }
    }
    Ok(out)
}

/// Drops items below the alignment threshold; every score goes into `hist`.
pub fn alignment_stage<T>(
    items: Vec<(PairRecord, T)>,
    cfg: &FilterConfig,
    hist: &mut AlignmentHistogram,
    ledger: &mut StageLedger,
) -> Result<Vec<(PairRecord, T)>, PipelineError> {
    let n = items.len() as u64;
    let (kept, h) = filter_by_alignment(with_scores(items)?, cfg);
    hist.merge(&h);
    let kept: Vec<_> = kept.into_iter().map(|(x, _)| x).collect();
    record_filter(ledger, Stage::AlignmentFilter, n, kept.len() as u64, "low_alignment")?;
    Ok(kept)
}

fn record_filter(ledger: &mut StageLedger, stage: Stage, input: u64, kept: u64, reason: &str) -> Result<(), StatsError> {
    for _ in 0..kept {
        ledger.record(stage, true, None)?;
    }
    ledger.record_rejects(stage, reason, input - kept)
}

/// Writes items to shards.
pub fn shard_stage<B: AsRef<[u8]>>(items: &[(PairRecord, B)], writer: &mut ShardWriter, ledger: &mut StageLedger) -> Result<(), PipelineError> {
    for (record, bytes) in items {
        let entry = ShardEntry::from_record(record)
            .ok_or_else(|| PipelineError::Input(format!("{} is missing fields needed for a shard", record.image_url)))?;
        writer.push(&entry, bytes.as_ref()).map_err(io_err("writing shard"))?;
        ledger.record(Stage::ShardWrite, true, None)?;
    }
    Ok(())
}

/// Options of [`run_pipeline`] that come from the command line.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Use the mock scorer regardless of config.
    pub mock_scorer: bool,
    /// Use the file fetcher.
    pub offline: bool,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// The manifest written to disk.
    pub manifest: Manifest,
    /// Shard index.
    pub shards: ShardIndex,
}

struct RunState {
    ledger: StageLedger,
    hist: AlignmentHistogram,
    scorer_name: String,
}

fn build_manifest(cfg: &Config, state: &RunState) -> Manifest {
    Manifest {
        manifest_version: MANIFEST_VERSION,
        snapshot_id: cfg.run.snapshot_id.clone(),
        config_fingerprint: config_fingerprint(&cfg.filters, &cfg.dedup),
        filters: cfg.filters,
        bloom: cfg.dedup,
        lang: cfg.doc_gate.clone(),
        scorer: state.scorer_name.clone(),
        stages: state.ledger.clone(),
        alignment_histogram: state.hist.clone(),
        final_count: state.ledger.final_count(),
    }
}

/// Runs every stage in pipeline order. `observer` is told each time a stage
/// starts (image stages start once per batch). On failure a partial
/// manifest is flushed before the error is returned.
pub fn run_pipeline(cfg: &Config, opts: RunOptions, observer: &mut dyn FnMut(Stage)) -> Result<RunOutput, PipelineError> {
    let layout = Layout::new(&cfg.run.out_dir);
    fs::create_dir_all(layout.root()).map_err(io_err(format!("creating {}", layout.root().display())))?;
    let mut state = RunState { ledger: StageLedger::full_pipeline(), hist: AlignmentHistogram::default(), scorer_name: String::new() };
    let result = run_inner(cfg, opts, &layout, &mut state, observer);
    match result {
        Ok(shards) => {
            state.ledger.check()?;
            let manifest = build_manifest(cfg, &state);
            if manifest.final_count != shards.total {
                return Err(PipelineError::Input(format!("manifest counts {} pairs but shards hold {}", manifest.final_count, shards.total)));
            }
            fs::write(layout.manifest(), manifest.to_json()).map_err(io_err("writing manifest"))?;
            let _ = fs::remove_file(layout.partial_manifest());
            Ok(RunOutput { manifest, shards })
        }
        Err(e) => {
            let manifest = build_manifest(cfg, &state);
            if let Err(w) = fs::write(layout.partial_manifest(), manifest.to_json()) {
                log::error!("could not flush partial manifest: {w}");
            }
            Err(e)
        }
    }
}

fn run_inner(cfg: &Config, opts: RunOptions, layout: &Layout, state: &mut RunState, observer: &mut dyn FnMut(Stage)) -> Result<ShardIndex, PipelineError> {
    let sources = warc_sources(cfg)?;
    let fetcher = make_fetcher(cfg, opts.offline)?;
    let mut scorer = make_scorer(cfg, opts.mock_scorer)?;
    state.scorer_name = scorer.name();
    let rt = tokio::runtime::Runtime::new().map_err(io_err("starting async runtime"))?;
    let blobs = BlobStore::open(layout.blobs()).map_err(io_err("opening blob store"))?;

    // Document stages stream together; candidates spill to disk.
    for s in [Stage::Ingest, Stage::DocGate, Stage::PairExtract, Stage::DedupUrlCaption] {
        observer(s);
    }
    let mut dedup = Deduplicator::new(&[KeyKind::ImageUrl, KeyKind::Caption], &cfg.dedup)?;
    let spill_path = layout.deduped();
    {
        let mut spill = BufWriter::new(File::create(&spill_path).map_err(io_err(format!("creating {}", spill_path.display())))?);
        for source in &sources {
            ingest(source, cfg.ingest.max_record_bytes, &cfg.fetch.user_agent, &mut state.ledger, |doc, ledger| {
                for record in gate_and_extract(&doc, &cfg.doc_gate, &cfg.run.snapshot_id, ledger)? {
                    if dedup_one(&record, &mut dedup, Stage::DedupUrlCaption, ledger)? {
                        serde_json::to_writer(&mut spill, &record).map_err(|e| io_err("spilling candidates")(e.into()))?;
                        spill.write_all(b"\n").map_err(io_err("spilling candidates"))?;
                    }
                }
                Ok(())
            })?;
        }
        spill.flush().map_err(io_err("spilling candidates"))?;
    }
    save_filters(&layout.state(), &dedup)?;
    drop(dedup);

    // Image stages over bounded batches.
    let shard_dir = layout.shards();
    if shard_dir.join("index.json").exists() {
        fs::remove_dir_all(&shard_dir).map_err(io_err(format!("clearing {}", shard_dir.display())))?;
    }
    let mut writer = ShardWriter::new(&shard_dir, cfg.output.shard_size).map_err(io_err("creating shard directory"))?;
    let mut phash_dedup = Deduplicator::new(&[KeyKind::Phash], &cfg.dedup)?;
    let mut lines = BufReader::new(File::open(&spill_path).map_err(io_err(format!("opening {}", spill_path.display())))?).lines();
    let mut first = true;
    loop {
        let mut batch = Vec::with_capacity(cfg.run.batch_size);
        for line in lines.by_ref().take(cfg.run.batch_size) {
            let line = line.map_err(io_err("reading spilled candidates"))?;
            let record: PairRecord = serde_json::from_str(&line).map_err(|e| io_err("reading spilled candidates")(e.into()))?;
            batch.push(record);
        }
        if batch.is_empty() && !first {
            break;
        }
        first = false;
        let done = batch.len() < cfg.run.batch_size;

        observer(Stage::Fetch);
        let items = fetch_stage(&rt, &fetcher, batch, &cfg.fetch, &blobs, &mut state.ledger)?;
        observer(Stage::QualityGate);
        let mut items = quality_stage(items, &cfg.filters, &mut state.ledger)?;
        score_stage(&mut items, &mut scorer)?;
        observer(Stage::NsfwFilter);
        let items = nsfw_stage(items, &cfg.filters, &mut state.ledger)?;
        observer(Stage::PhashDedup);
        let items = phash_stage(items, &mut phash_dedup, &mut state.ledger)?;
        observer(Stage::AlignmentFilter);
        let items = alignment_stage(items, &cfg.filters, &mut state.hist, &mut state.ledger)?;
        observer(Stage::ShardWrite);
        shard_stage(&items, &mut writer, &mut state.ledger)?;
        if done {
            break;
        }
    }
    save_filters(&layout.state(), &phash_dedup)?;
    writer.finish().map_err(io_err("finishing shards"))
}

/// Counters of a stage-wise run, stored between invocations.
pub fn load_ledger(layout: &Layout) -> Result<StageLedger, PipelineError> {
    match read_json::<StageLedger>(&layout.ledger()) {
        Ok(l) => Ok(l),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(StageLedger::full_pipeline()),
        Err(e) => Err(io_err("reading ledger")(e)),
    }
}

/// Persists stage-wise counters.
pub fn save_ledger(layout: &Layout, ledger: &StageLedger) -> Result<(), PipelineError> {
    write_json(&layout.ledger(), ledger).map_err(io_err("writing ledger"))
}

/// Manifest assembled from a stage-wise run's ledger and histogram.
pub fn stagewise_manifest(cfg: &Config, layout: &Layout, scorer: &str) -> Result<Manifest, PipelineError> {
    let ledger = load_ledger(layout)?;
    let hist = match read_json::<AlignmentHistogram>(&layout.histogram()) {
        Ok(h) => h,
        Err(e) if e.kind() == io::ErrorKind::NotFound => AlignmentHistogram::default(),
        Err(e) => return Err(io_err("reading histogram")(e)),
    };
    Ok(build_manifest(cfg, &RunState { ledger, hist, scorer_name: scorer.to_string() }))
}
