//! Fine-tuning-free serving from stored task parameters, ranking metrics and
//! the period evaluation protocol.

mod pf;

pub use pf::PfTrainer;

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::NumError;
use crate::towers::{embed_item, embed_user, EmbeddingTables, Example, NetParams};

pub const DEFAULT_EVAL_BATCH: usize = 1024;
pub const METRIC_KS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("no parameters for task {task} at period {period}: not yet served")]
    NotYetServed { period: usize, task: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Per-task network parameters keyed by `(period, task)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    entries: BTreeMap<(usize, usize), NetParams>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a copy of `omega`; an existing entry is overwritten with a
    /// warning.
    pub fn store_params(&mut self, period: usize, task: usize, omega: &NetParams) {
        if self.entries.insert((period, task), omega.clone()).is_some() {
            log::warn!("registry: overwriting parameters of task {task} at period {period}");
        }
    }

    pub fn get(&self, period: usize, task: usize) -> Result<&NetParams, ServeError> {
        self.entries
            .get(&(period, task))
            .ok_or(ServeError::NotYetServed { period, task })
    }

    /// Most recent entry for `task` written strictly before `period`.
    pub fn latest_before(&self, period: usize, task: usize) -> Option<(usize, &NetParams)> {
        self.entries
            .range(..(period, 0))
            .rev()
            .find(|((_, n), _)| *n == task)
            .map(|(&(p, _), net)| (p, net))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &NetParams)> {
        self.entries.iter()
    }
}

/// 1-based rank of `scores[positive]` under a descending sort that keeps
/// input order among equal scores.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < positive))
        .count()
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Candidate indices sorted by descending dot product with `z_item`; ties
/// keep input order. Only reads its inputs.
pub fn serve_scores(
    item: &[f64],
    candidates: &[Vec<usize>],
    tables: &EmbeddingTables,
    net: &NetParams,
) -> Result<Vec<usize>, NumError> {
    let zi = net.item.forward(item)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (k, u) in candidates.iter().enumerate() {
        let zu = net.user.forward(&embed_user(u, tables))?;
        scored.push((k, crate::towers::dot(&zu, &zi)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored.into_iter().map(|(k, _)| k).collect())
}

/// [`serve_scores`] with parameters looked up in the registry.
pub fn serve_from_registry(
    item: &[f64],
    task: usize,
    candidates: &[Vec<usize>],
    tables: &EmbeddingTables,
    registry: &ParamRegistry,
    period: usize,
) -> Result<Vec<usize>, ServeError> {
    let net = registry.get(period, task)?;
    Ok(serve_scores(item, candidates, tables, net)?)
}

/// Recall@K and NDCG@K at K = 5, 10, 20, averaged over queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub n_queries: usize,
    pub recall: [f64; 3],
    pub ndcg: [f64; 3],
}

impl SliceMetrics {
    fn add(&mut self, rank: usize) {
        self.n_queries += 1;
        for (j, &k) in METRIC_KS.iter().enumerate() {
            self.recall[j] += recall_at_k(rank, k);
            self.ndcg[j] += ndcg_at_k(rank, k);
        }
    }

    fn finish(&mut self) {
        if self.n_queries > 0 {
            let n = self.n_queries as f64;
            for j in 0..3 {
                self.recall[j] /= n;
                self.ndcg[j] /= n;
            }
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        METRIC_KS
            .iter()
            .position(|&x| x == k)
            .map(|j| self.recall[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        METRIC_KS.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }
}

/// One line of the JSON-lines report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub period: usize,
    pub slice: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub period: usize,
    pub cold: SliceMetrics,
    pub popular: SliceMetrics,
    /// Largest frozen view count among cold-slice queries.
    pub max_cold_views: Option<u64>,
    /// Smallest frozen view count among popular-slice queries.
    pub min_popular_views: Option<u64>,
    /// Positives skipped because their task had no stored parameters yet.
    pub skipped: usize,
    /// Mean candidate-pool size per query.
    pub mean_candidates: f64,
    /// No cold positives: excluded from averages.
    pub empty: bool,
}

impl PeriodReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (name, m) in [("cold", &self.cold), ("popular", &self.popular)] {
            for (j, &k) in METRIC_KS.iter().enumerate() {
                for (metric, v) in [("recall", m.recall[j]), ("ndcg", m.ndcg[j])] {
                    out.push(MetricRecord {
                        period: self.period,
                        slice: name.to_string(),
                        metric: metric.to_string(),
                        k,
                        value: v,
                        n_queries: m.n_queries,
                    });
                }
            }
        }
        out
    }
}

/// Mean of the non-empty period reports, slice by slice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub cold: SliceMetrics,
    pub popular: SliceMetrics,
    pub n_periods: usize,
}

pub fn mean_report(reports: &[PeriodReport]) -> FinalReport {
    let mut out = FinalReport::default();
    let mut n_pop = 0usize;
    for r in reports {
        if !r.empty {
            out.n_periods += 1;
            out.cold.n_queries += r.cold.n_queries;
            for j in 0..3 {
                out.cold.recall[j] += r.cold.recall[j];
                out.cold.ndcg[j] += r.cold.ndcg[j];
            }
        }
        if r.popular.n_queries > 0 {
            n_pop += 1;
            out.popular.n_queries += r.popular.n_queries;
            for j in 0..3 {
                out.popular.recall[j] += r.popular.recall[j];
                out.popular.ndcg[j] += r.popular.ndcg[j];
            }
        }
    }
    for (m, n) in [(&mut out.cold, out.n_periods), (&mut out.popular, n_pop)] {
        if n > 0 {
            for j in 0..3 {
                m.recall[j] /= n as f64;
                m.ndcg[j] /= n as f64;
            }
        }
    }
    out
}

/// An encoded test interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub item_id: u64,
    pub example: Example,
    /// Frozen view count at interaction time.
    pub views: u64,
    pub task: usize,
}

/// Scores every positive of a test period against the other users of its
/// evaluation batch, using parameters stored before `period`.
pub fn evaluate_period(
    period: usize,
    records: &[EvalRecord],
    tables: &EmbeddingTables,
    registry: &ParamRegistry,
    batch_size: usize,
) -> Result<PeriodReport, NumError> {
    let mut report = PeriodReport {
        period,
        ..Default::default()
    };
    let mut candidates_total = 0usize;
    for batch in records.chunks(batch_size.max(1)) {
        let mut users: Vec<&[usize]> = Vec::new();
        let mut user_index: HashMap<&[usize], usize> = HashMap::new();
        let mut item_users: HashMap<u64, HashSet<usize>> = HashMap::new();
        for r in batch {
            let next = users.len();
            let k = *user_index
                .entry(r.example.user.as_slice())
                .or_insert_with(|| {
                    users.push(r.example.user.as_slice());
                    next
                });
            item_users.entry(r.item_id).or_default().insert(k);
        }
        let embedded: Vec<Vec<f64>> = users.iter().map(|u| embed_user(u, tables)).collect();
        let mut user_out: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
        for r in batch.iter().filter(|r| r.example.label > 0.5) {
            let Some((_, net)) = registry.latest_before(period, r.task) else {
                report.skipped += 1;
                continue;
            };
            if let Entry::Vacant(slot) = user_out.entry(r.task) {
                let z = embedded
                    .iter()
                    .map(|e| net.user.forward(e))
                    .collect::<Result<Vec<_>, _>>()?;
                slot.insert(z);
            }
            let zu = &user_out[&r.task];
            let zi = net.item.forward(&embed_item(&r.example.item, tables))?;
            let me = user_index[r.example.user.as_slice()];
            let others = &item_users[&r.item_id];
            let mut scores = Vec::with_capacity(users.len());
            let mut pos = 0;
            for (k, z) in zu.iter().enumerate() {
                if k != me && others.contains(&k) {
                    continue;
                }
                if k == me {
                    pos = scores.len();
                }
                scores.push(crate::towers::dot(z, &zi)?);
            }
            candidates_total += scores.len();
            let rank = rank_of(&scores, pos);
            if r.task == 1 {
                report.cold.add(rank);
                report.max_cold_views =
                    Some(report.max_cold_views.map_or(r.views, |m| m.max(r.views)));
            } else {
                report.popular.add(rank);
                report.min_popular_views =
                    Some(report.min_popular_views.map_or(r.views, |m| m.min(r.views)));
            }
        }
    }
    let n = report.cold.n_queries + report.popular.n_queries;
    if n > 0 {
        report.mean_candidates = candidates_total as f64 / n as f64;
    }
    report.cold.finish();
    report.popular.finish();
    report.empty = report.cold.n_queries == 0;
    Ok(report)
}
