//! Interaction log ingestion, period partitioning and popularity tracking.
//!
//! Input is TSV with one `user_id<TAB>item_id<TAB>rating<TAB>timestamp`
//! record per line, UTF-8, no header.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratings strictly above this are positive.
pub const POSITIVE_RATING_THRESHOLD: f64 = 3.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot split {n} interactions into {periods} periods")]
    TooFewInteractions { n: usize, periods: usize },
    #[error("period count must be at least 2, got {0}")]
    TooFewPeriods(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: f64,
    pub timestamp: u64,
    pub label: u8,
}

impl Interaction {
    pub fn new(user_id: u64, item_id: u64, rating: f64, timestamp: u64) -> Self {
        Self {
            user_id,
            item_id,
            rating,
            timestamp,
            label: u8::from(rating > POSITIVE_RATING_THRESHOLD),
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Interaction, DataError> {
    let err = |reason: String| DataError::Parse {
        line: lineno,
        reason,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(err(format!(
            "expected 4 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let user_id = fields[0]
        .trim()
        .parse::<u64>()
        .map_err(|e| err(format!("user_id: {e}")))?;
    let item_id = fields[1]
        .trim()
        .parse::<u64>()
        .map_err(|e| err(format!("item_id: {e}")))?;
    let rating = fields[2]
        .trim()
        .parse::<f64>()
        .map_err(|e| err(format!("rating: {e}")))?;
    if !(0.0..=5.0).contains(&rating) {
        return Err(err(format!("rating {rating} outside [0, 5]")));
    }
    let timestamp = fields[3]
        .trim()
        .parse::<u64>()
        .map_err(|e| err(format!("timestamp: {e}")))?;
    Ok(Interaction::new(user_id, item_id, rating, timestamp))
}

/// Reads a TSV interaction log and returns it timestamp-sorted (stable on
/// ties). Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_interactions<R: BufRead>(source: R) -> Result<Vec<Interaction>, DataError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    out.sort_by_key(|x| x.timestamp);
    Ok(out)
}

/// Which interactions count as a view of the item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ViewMode {
    #[default]
    Positive,
    All,
}

impl std::str::FromStr for ViewMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "positive" => Ok(Self::Positive),
            "all" => Ok(Self::All),
            other => Err(format!("unknown view mode `{other}` (positive|all)")),
        }
    }
}

impl std::fmt::Display for ViewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Positive => "positive",
            Self::All => "all",
        })
    }
}

/// Per-item view counts `v_i`.
#[derive(Debug, Clone, Default)]
pub struct PopularityCounter {
    counts: HashMap<u64, u64>,
    mode: ViewMode,
}

impl PopularityCounter {
    pub fn new(mode: ViewMode) -> Self {
        Self {
            counts: HashMap::new(),
            mode,
        }
    }

    pub fn views(&self, item_id: u64) -> u64 {
        self.counts.get(&item_id).copied().unwrap_or(0)
    }

    /// Returns the count before `x`, then records `x` if it is a view.
    pub fn advance(&mut self, x: &Interaction) -> u64 {
        let before = self.views(x.item_id);
        if self.mode == ViewMode::All || x.is_positive() {
            *self.counts.entry(x.item_id).or_insert(0) += 1;
        }
        before
    }
}

/// One period `D_t` with per-interaction view counts frozen at formation.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodBatch {
    /// 1-based period index.
    pub period: usize,
    pub interactions: Vec<Interaction>,
    /// `views[k]` is the number of earlier views of `interactions[k].item_id`.
    pub views: Vec<u64>,
}

impl PeriodBatch {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Contiguous slice sizes for `n` items over `parts` parts, equal to within 1
/// with the larger slices first.
pub fn equal_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|p| base + usize::from(p < extra)).collect()
}

/// Splits a timestamp-sorted stream into `periods` equal-count periods and
/// freezes each interaction's prior view count while doing so.
pub fn partition_periods(
    interactions: &[Interaction],
    periods: usize,
    mode: ViewMode,
) -> Result<Vec<PeriodBatch>, DataError> {
    if periods < 2 {
        return Err(DataError::TooFewPeriods(periods));
    }
    if interactions.len() < periods {
        return Err(DataError::TooFewInteractions {
            n: interactions.len(),
            periods,
        });
    }
    let mut counter = PopularityCounter::new(mode);
    let mut out = Vec::with_capacity(periods);
    let mut start = 0;
    for (p, size) in equal_sizes(interactions.len(), periods)
        .into_iter()
        .enumerate()
    {
        let slice = &interactions[start..start + size];
        let views = slice.iter().map(|x| counter.advance(x)).collect();
        out.push(PeriodBatch {
            period: p + 1,
            interactions: slice.to_vec(),
            views,
        });
        start += size;
    }
    Ok(out)
}

/// Number of leading elements that go to the support set.
pub fn support_len(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

/// Order-preserving split: the first `⌈ratio·n⌉` elements form the support
/// set, the rest the query set.
pub fn split_support_query<T>(task_data: &[T], ratio: f64) -> (&[T], &[T]) {
    task_data.split_at(support_len(task_data.len(), ratio))
}

/// Reads an optional item side-information table:
/// `item_id<TAB>content_1<TAB>content_2...`.
pub fn load_item_features<R: BufRead>(source: R) -> Result<HashMap<u64, Vec<u64>>, DataError> {
    let mut out = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut vals = Vec::new();
        for f in line.trim_end_matches('\r').split('\t') {
            vals.push(f.trim().parse::<u64>().map_err(|e| DataError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        let id = vals.remove(0);
        out.insert(id, vals);
    }
    Ok(out)
}
