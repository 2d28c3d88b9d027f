//! Embedding-masking breakdown: how much an item's top representation moves
//! when its behavior slots or its content slots are zeroed.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::numcore::NumError;
use crate::serve_eval::{EvalRecord, ParamRegistry};
use crate::towers::{embed_item, EmbeddingTables, FeatureSchema};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub slice: &'static str,
    pub mask: &'static str,
    pub n_items: usize,
    /// Mean squared change per output dimension.
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    /// Rows in order: cold/behavior, cold/content, popular/behavior,
    /// popular/content.
    pub rows: Vec<ProbeRow>,
    pub batches_used: usize,
    /// Fewer batches were available than requested.
    pub short: bool,
}

impl ProbeResult {
    pub fn get(&self, slice: &str, mask: &str) -> Option<&ProbeRow> {
        self.rows
            .iter()
            .find(|r| r.slice == slice && r.mask == mask)
    }

    /// `slice,mask,dim,sq_err` lines for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slice,mask,dim,sq_err\n");
        for r in &self.rows {
            for (d, v) in r.per_dim.iter().enumerate() {
                let _ = writeln!(s, "{},{},{d},{v}", r.slice, r.mask);
            }
        }
        s
    }
}

/// Probes the distinct items of the last `n_batches` batches of `records`,
/// each under the most recent stored parameters of its own task.
pub fn mask_probe(
    records: &[EvalRecord],
    tables: &EmbeddingTables,
    registry: &ParamRegistry,
    schema: &FeatureSchema,
    n_batches: usize,
    batch_size: usize,
) -> Result<ProbeResult, NumError> {
    let batch_size = batch_size.max(1);
    let available = records.len().div_ceil(batch_size);
    let used = n_batches.min(available);
    let start = records.len().saturating_sub(used * batch_size);
    let tail = &records[start..];
    if used < n_batches {
        log::warn!("probe: only {used} of {n_batches} batches available");
    }

    let behavior: Vec<usize> = (0..schema.item.len())
        .filter(|&q| schema.item[q].kind.is_behavior())
        .flat_map(|q| schema.item_slot_range(q))
        .collect();
    let content: Vec<usize> = (0..schema.item.len())
        .filter(|&q| !schema.item[q].kind.is_behavior())
        .flat_map(|q| schema.item_slot_range(q))
        .collect();

    let mut rows: Vec<ProbeRow> = [
        ("cold", "behavior"),
        ("cold", "content"),
        ("popular", "behavior"),
        ("popular", "content"),
    ]
    .into_iter()
    .map(|(slice, mask)| ProbeRow {
        slice,
        mask,
        n_items: 0,
        per_dim: Vec::new(),
        mean: 0.0,
    })
    .collect();
    let mut seen = HashSet::new();
    for r in tail {
        if !seen.insert(r.item_id) {
            continue;
        }
        let Some((_, net)) = registry.latest_before(usize::MAX, r.task) else {
            continue;
        };
        let e = embed_item(&r.example.item, tables);
        let z = net.item.forward(&e)?;
        let base = if r.task == 1 { 0 } else { 2 };
        for (off, dims) in [(0, &behavior), (1, &content)] {
            let mut masked = e.clone();
            for &d in dims {
                masked[d] = 0.0;
            }
            let zm = net.item.forward(&masked)?;
            let row = &mut rows[base + off];
            if row.per_dim.is_empty() {
                row.per_dim = vec![0.0; z.len()];
            }
            for (acc, (a, b)) in row.per_dim.iter_mut().zip(z.iter().zip(&zm)) {
                *acc += (a - b) * (a - b);
            }
            row.n_items += 1;
        }
    }
    for row in &mut rows {
        if row.n_items > 0 {
            let n = row.n_items as f64;
            row.per_dim.iter_mut().for_each(|x| *x /= n);
            row.mean = row.per_dim.iter().sum::<f64>() / row.per_dim.len() as f64;
        }
    }
    Ok(ProbeResult {
        rows,
        batches_used: used,
        short: used < n_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Mat;
    use crate::towers::{Example, FeatureKind, FeatureSpec, NetParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FeatureSchema, EmbeddingTables, ParamRegistry) {
        let schema = FeatureSchema {
            user: vec![FeatureSpec::new("user_id", 3, 2, FeatureKind::BehaviorId)],
            item: vec![
                FeatureSpec::new("item_id", 4, 2, FeatureKind::BehaviorId),
                FeatureSpec::new("content_0", 3, 2, FeatureKind::Content),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tables = EmbeddingTables::init(&schema, &mut rng);
        let mut reg = ParamRegistry::new();
        let net = NetParams::init(&schema, &[4], 3, &mut rng);
        reg.store_params(1, 1, &net);
        reg.store_params(1, 2, &net);
        (schema, tables, reg)
    }

    fn rec(item: u64, rows: Vec<usize>, task: usize) -> EvalRecord {
        EvalRecord {
            item_id: item,
            example: Example::new(vec![1], rows, 1.0),
            views: 0,
            task,
        }
    }

    #[test]
    fn zero_slots_give_zero_error() {
        let (schema, tables, reg) = setup();
        // Row 0 of every table is zero, so masking changes nothing.
        let recs = vec![rec(1, vec![0, 0], 1), rec(2, vec![0, 0], 2)];
        let p = mask_probe(&recs, &tables, &reg, &schema, 1, 8).unwrap();
        assert!(p.rows.iter().all(|r| r.mean == 0.0 && r.n_items == 1));
        assert!(!p.short);
    }

    #[test]
    fn random_net_moves_under_both_masks() {
        let (schema, mut tables, reg) = setup();
        for t in tables.tables_mut() {
            *t = Mat::new(
                t.rows(),
                t.cols(),
                (0..t.len()).map(|k| 1.0 + k as f64).collect(),
            )
            .unwrap();
        }
        let recs = vec![
            rec(1, vec![1, 2], 1),
            rec(2, vec![2, 1], 2),
            rec(1, vec![1, 2], 1),
        ];
        let p = mask_probe(&recs, &tables, &reg, &schema, 5, 8).unwrap();
        assert!(p.short);
        assert_eq!(p.get("cold", "behavior").unwrap().n_items, 1);
        assert!(p.rows.iter().all(|r| r.mean > 0.0));
        assert_eq!(p.to_csv().lines().count(), 1 + 4 * 3);
    }
}
