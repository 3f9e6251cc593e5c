//! Per-stage input/output/rejection accounting.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// WARC records to HTML documents.
    Ingest,
    /// Title and language checks.
    DocGate,
    /// Raw `<img>` / `<figure>` occurrences to valid candidates.
    PairExtract,
    /// URL and caption dedup.
    DedupUrlCaption,
    /// Image download.
    Fetch,
    /// Decode plus size / aspect / color checks.
    QualityGate,
    /// NSFW threshold.
    NsfwFilter,
    /// Perceptual-hash dedup.
    PhashDedup,
    /// Image-text alignment threshold.
    AlignmentFilter,
    /// Shard output.
    ShardWrite,
}

impl Stage {
    /// Every stage, in pipeline order.
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::DocGate,
        Stage::PairExtract,
        Stage::DedupUrlCaption,
        Stage::Fetch,
        Stage::QualityGate,
        Stage::NsfwFilter,
        Stage::PhashDedup,
        Stage::AlignmentFilter,
        Stage::ShardWrite,
    ];

    /// Wire name.
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::DocGate => "doc_gate",
            Stage::PairExtract => "pair_extract",
            Stage::DedupUrlCaption => "dedup_url_caption",
            Stage::Fetch => "fetch",
            Stage::QualityGate => "quality_gate",
            Stage::NsfwFilter => "nsfw_filter",
            Stage::PhashDedup => "phash_dedup",
            Stage::AlignmentFilter => "alignment_filter",
            Stage::ShardWrite => "shard_write",
        }
    }

    /// Whether the stage counts pairs rather than records or documents.
    pub fn is_pair_level(self) -> bool {
        self >= Stage::PairExtract
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Counters for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    /// Which stage.
    pub stage: Stage,
    /// Items offered.
    pub input_count: u64,
    /// Items passed on.
    pub output_count: u64,
    /// Rejections by reason.
    pub reject_counts: BTreeMap<String, u64>,
    /// Non-rejecting events worth auditing (truncated captions, lossy
    /// charset decodes, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, u64>,
}

impl StageStats {
    /// Zeroed counters.
    pub fn new(stage: Stage) -> Self {
        Self { stage, input_count: 0, output_count: 0, reject_counts: BTreeMap::new(), notes: BTreeMap::new() }
    }

    /// Total rejections.
    pub fn rejected(&self) -> u64 {
        self.reject_counts.values().sum()
    }

    /// `output + rejects == input`.
    pub fn is_conserved(&self) -> bool {
        self.output_count + self.rejected() == self.input_count
    }
}

/// Accounting error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatsError {
    /// The stage was not registered with the ledger.
    UnknownStage(Stage),
    /// A stage's counters do not add up.
    NotConserved(Stage),
    /// Pair-level output grew from one stage to the next.
    NotMonotone {
        /// Earlier stage.
        before: Stage,
        /// Later stage with more output.
        after: Stage,
    },
    /// Stages are not in pipeline order.
    OutOfOrder,
}

impl fmt::Display for StatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatsError::UnknownStage(s) => write!(f, "stage {s} is not registered"),
            StatsError::NotConserved(s) => write!(f, "stage {s}: output + rejects != input"),
            StatsError::NotMonotone { before, after } => write!(f, "stage {after} outputs more than {before}"),
            StatsError::OutOfOrder => f.write_str("stages are not in pipeline order"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for StatsError {}

/// Ordered set of stage counters.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageLedger {
    stages: Vec<StageStats>,
}

impl StageLedger {
    /// Ledger with the given stages registered, in that order.
    pub fn new(stages: &[Stage]) -> Self {
        Self { stages: stages.iter().map(|&s| StageStats::new(s)).collect() }
    }

    /// Ledger with every pipeline stage.
    pub fn full_pipeline() -> Self {
        Self::new(&Stage::ALL)
    }

    fn get_mut(&mut self, stage: Stage) -> Result<&mut StageStats, StatsError> {
        self.stages.iter_mut().find(|s| s.stage == stage).ok_or(StatsError::UnknownStage(stage))
    }

    /// Stats of `stage`, if registered.
    pub fn get(&self, stage: Stage) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// All registered stages in order.
    pub fn stages(&self) -> &[StageStats] {
        &self.stages
    }

    /// Counts one item: accepted, or rejected for `reason`. Unseen reasons
    /// are registered on first use.
    pub fn record(&mut self, stage: Stage, accepted: bool, reason: Option<&str>) -> Result<(), StatsError> {
        let s = self.get_mut(stage)?;
        s.input_count += 1;
        if accepted {
            s.output_count += 1;
        } else {
            *s.reject_counts.entry(reason.unwrap_or("unspecified").to_string()).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Counts `n` rejections at once.
    pub fn record_rejects(&mut self, stage: Stage, reason: &str, n: u64) -> Result<(), StatsError> {
        let s = self.get_mut(stage)?;
        s.input_count += n;
        *s.reject_counts.entry(reason.to_string()).or_insert(0) += n;
        Ok(())
    }

    /// Overwrites the counters of `stats.stage`, e.g. after re-running it.
    pub fn replace(&mut self, stats: StageStats) -> Result<(), StatsError> {
        let stage = stats.stage;
        *self.get_mut(stage)? = stats;
        Ok(())
    }

    /// Zeroes the counters of `stage`.
    pub fn reset(&mut self, stage: Stage) -> Result<(), StatsError> {
        self.replace(StageStats::new(stage))
    }

    /// Bumps a non-rejecting note counter.
    pub fn note(&mut self, stage: Stage, what: &str, n: u64) -> Result<(), StatsError> {
        let s = self.get_mut(stage)?;
        *s.notes.entry(what.to_string()).or_insert(0) += n;
        Ok(())
    }

    /// Output of the last registered stage.
    pub fn final_count(&self) -> u64 {
        self.stages.last().map_or(0, |s| s.output_count)
    }

    /// Checks conservation everywhere, pipeline order, and that pair-level
    /// output never grows from one stage to the next.
    pub fn check(&self) -> Result<(), StatsError> {
        if self.stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
            return Err(StatsError::OutOfOrder);
        }
        if let Some(s) = self.stages.iter().find(|s| !s.is_conserved()) {
            return Err(StatsError::NotConserved(s.stage));
        }
        for w in self.stages.windows(2) {
            if w[0].stage.is_pair_level() && w[1].output_count > w[0].output_count {
                return Err(StatsError::NotMonotone { before: w[0].stage, after: w[1].stage });
            }
        }
        Ok(())
    }
}

/// Final counts across snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    /// `(snapshot id, final count)` in input order.
    pub rows: Vec<(String, u64)>,
    /// Sum of final counts.
    pub total: u64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|(id, _)| id.len()).max().unwrap_or(0).max("Snapshot".len());
        writeln!(f, "{:<width$}  {:>15}", "Snapshot", "# Examples")?;
        for (id, n) in &self.rows {
            writeln!(f, "{:<width$}  {:>15}", id, group_thousands(*n))?;
        }
        write!(f, "{:<width$}  {:>15}", "Total", group_thousands(self.total))
    }
}

/// `155232707` -> `155,232,707`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Per-snapshot final counts and their total.
pub fn summarize<'a, I>(finals: I) -> Summary
where
    I: IntoIterator<Item = (&'a str, u64)>,
{
    let rows: Vec<(String, u64)> = finals.into_iter().map(|(id, n)| (id.to_string(), n)).collect();
    let total = rows.iter().map(|r| r.1).sum();
    Summary { rows, total }
}
