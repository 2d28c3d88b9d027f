//! Cold-start task enhancer.
//!
//! While an item sits in the cold task its behavior slots (ID and
//! sequence-like features) are copied into a [`SnapshotStore`]. Once the item
//! shows up in a popular task, those frozen slots are recombined with its
//! current content slots to re-render the interaction as if the item were
//! still cold. The simulated interactions feed two extra losses: an
//! augmentation loss (a full support/query meta task) and an instructor loss
//! that regresses the cold network's penultimate representation, through a
//! dedicated affine head, onto the item's current well-trained ID embedding.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::meta::{run_task, LslrRates, MetaError, TaskRun};
use crate::numcore::{Mat, NumError, Tape};
use crate::towers::{
    embed_item, embed_items_on_tape, net_on_tape, tower_hidden_tape, EmbeddingTables, Example,
    FeatureSchema, NetParams, Slot, TableGrads,
};

pub const DEFAULT_SNAPSHOT_CAPACITY: usize = 100_000;

/// `γ_M`, `γ_S`, `γ_A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub meta: f64,
    pub instructor: f64,
    pub augmentation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            meta: 1.0,
            instructor: 3.0,
            augmentation: 2.0,
        }
    }
}

/// `L^T = γ_M·L^M + γ_S·L^S + γ_A·L^A`.
pub fn total_loss(meta: f64, instructor: f64, augmentation: f64, w: &LossWeights) -> f64 {
    w.meta * meta + w.instructor * instructor + w.augmentation * augmentation
}

/// Affine head `f^Sup` replacing the last item-tower layer of the cold network.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructorHead {
    /// `id_dim × penultimate_dim`
    pub w: Mat,
    /// `1 × id_dim`
    pub b: Mat,
}

impl InstructorHead {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("valid std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            w: Mat::new(out_dim, in_dim, data).expect("shape"),
            b: Mat::zeros(1, out_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w: Mat,
    pub b: Mat,
}

impl HeadGrads {
    pub fn zeros_like(head: &InstructorHead) -> Self {
        Self {
            w: Mat::zeros(head.w.rows(), head.w.cols()),
            b: Mat::zeros(head.b.rows(), head.b.cols()),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &HeadGrads) -> Result<(), NumError> {
        self.w.axpy(a, &other.w)?;
        self.b.axpy(a, &other.b)
    }

    pub fn all_finite(&self) -> bool {
        self.w.all_finite() && self.b.all_finite()
    }
}

/// Stored behavior slots of one item, in schema order of the behavior
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub slots: Vec<Vec<f64>>,
    /// Period of the last write.
    pub period: usize,
}

/// `Φ̂`: cold-period behavior embeddings, bounded with least-recently-written
/// eviction.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    entries: HashMap<u64, (Snapshot, u64)>,
    by_stamp: BTreeMap<u64, u64>,
    capacity: usize,
    clock: u64,
    writes: u64,
}

impl SnapshotStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: HashMap::new(),
            by_stamp: BTreeMap::new(),
            capacity: capacity.max(1),
            clock: 0,
            writes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total writes ever made.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn get(&self, item_id: u64) -> Option<&Snapshot> {
        self.entries.get(&item_id).map(|(s, _)| s)
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.entries.contains_key(&item_id)
    }

    /// Items in write order, oldest first.
    pub fn items_by_age(&self) -> impl Iterator<Item = (u64, &Snapshot)> {
        self.by_stamp
            .values()
            .map(move |id| (*id, &self.entries[id].0))
    }

    /// Inserts or overwrites, evicting the least recently written entry when
    /// full.
    pub fn put(&mut self, item_id: u64, snap: Snapshot) {
        self.clock += 1;
        self.writes += 1;
        if let Some((_, old_stamp)) = self.entries.remove(&item_id) {
            self.by_stamp.remove(&old_stamp);
        } else if self.entries.len() >= self.capacity {
            if let Some((&stamp, &victim)) = self.by_stamp.iter().next() {
                self.by_stamp.remove(&stamp);
                self.entries.remove(&victim);
            }
        }
        self.by_stamp.insert(self.clock, item_id);
        self.entries.insert(item_id, (snap, self.clock));
    }

    /// Copies current behavior slots of every cold-task item into the store;
    /// the latest occurrence of an item in the batch wins. Content slots are
    /// never stored.
    pub fn snapshot_cold(
        &mut self,
        cold: &[(u64, &Example)],
        tables: &EmbeddingTables,
        schema: &FeatureSchema,
        period: usize,
    ) {
        let behavior: Vec<usize> = (0..schema.item.len())
            .filter(|&q| schema.item[q].kind.is_behavior())
            .collect();
        for &(item_id, ex) in cold {
            let slots = behavior
                .iter()
                .map(|&q| match &ex.item[q] {
                    Slot::Row(r) => EmbeddingTables::lookup(&tables.item[q], *r).to_vec(),
                    Slot::Fixed(v) => v.clone(),
                })
                .collect();
            self.put(item_id, Snapshot { slots, period });
        }
    }
}

/// Same capacity and the same entries in the same write order.
impl PartialEq for SnapshotStore {
    fn eq(&self, other: &Self) -> bool {
        self.capacity() == other.capacity() && self.items_by_age().eq(other.items_by_age())
    }
}

/// Re-renders `ex` with the snapshot's behavior slots and its own (current)
/// content slots.
pub fn simulate_example(ex: &Example, snap: &Snapshot, schema: &FeatureSchema) -> Example {
    let mut stored = snap.slots.iter();
    let item = schema
        .item
        .iter()
        .zip(&ex.item)
        .map(|(spec, slot)| {
            if spec.kind.is_behavior() {
                Slot::Fixed(
                    stored
                        .next()
                        .expect("one stored slot per behavior feature")
                        .clone(),
                )
            } else {
                slot.clone()
            }
        })
        .collect();
    Example {
        user: ex.user.clone(),
        item,
        label: ex.label,
    }
}

/// `ê_i = [ê^ID, ê^seq…, e^con…]`; `None` when the item has no snapshot.
pub fn simulate_cold_embedding(
    item_id: u64,
    ex: &Example,
    store: &SnapshotStore,
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
) -> Option<Vec<f64>> {
    let snap = store.get(item_id)?;
    Some(embed_item(&simulate_example(ex, snap, schema).item, tables))
}

/// A popular interaction re-rendered with its item's cold-period slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub item_id: u64,
    /// Current ID-table row of the item, the instructor's target.
    pub id_row: usize,
    pub example: Example,
}

/// Simulated cold interactions for every popular interaction whose item has a
/// snapshot, in input order.
pub fn simulate_hot(
    hot: &[(u64, &Example)],
    store: &SnapshotStore,
    schema: &FeatureSchema,
) -> Vec<Simulated> {
    let id_slot = schema.id_slot();
    hot.iter()
        .filter_map(|&(item_id, ex)| {
            store.get(item_id).map(|s| Simulated {
                item_id,
                id_row: ex.item_row(id_slot).unwrap_or(0),
                example: simulate_example(ex, s, schema),
            })
        })
        .collect()
}

/// `L^A`: adapt `Θ` on the simulated support half, score the simulated query
/// half. `None` (a zero loss) when the simulated set cannot form both halves.
pub fn augmentation_loss(
    simulated: &[Example],
    theta: &NetParams,
    rates: &LslrRates,
    tables: &EmbeddingTables,
    ratio: f64,
    tau: f64,
) -> Result<Option<TaskRun>, MetaError> {
    if simulated.is_empty() {
        log::debug!("augmentation: empty simulated set, L^A = 0");
        return Ok(None);
    }
    let run = run_task(theta, rates, tables, simulated, ratio, tau)?;
    if run.is_none() {
        log::debug!("augmentation: simulated set too small to split, L^A = 0");
    }
    Ok(run)
}

/// `ẑ^ID = W^Sup · e_{L−1} + b^Sup`, where `e_{L−1}` is the item tower of
/// `omega_cold` run through its first `L−1` layers.
pub fn instructor_forward(
    e_hat: &[f64],
    omega_cold: &NetParams,
    head: &InstructorHead,
) -> Result<Vec<f64>, NumError> {
    let h = omega_cold.item.penultimate(e_hat)?;
    let mut z = head.w.matvec(&h)?;
    for (a, &b) in z.iter_mut().zip(head.b.as_slice()) {
        *a += b;
    }
    Ok(z)
}

/// `(1/d)·‖ẑ − e‖²`.
pub fn instructor_loss(z: &[f64], e_id: &[f64]) -> Result<f64, NumError> {
    if z.len() != e_id.len() {
        return Err(NumError::DimMismatch {
            op: "instructor_loss",
            expected: format!("len {}", e_id.len()),
            found: format!("len {}", z.len()),
        });
    }
    let s: f64 = z.iter().zip(e_id).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / z.len() as f64)
}

/// `L^S` over distinct simulated items and its gradients.
#[derive(Debug, Clone)]
pub struct InstructorOutcome {
    pub loss: f64,
    pub n_items: usize,
    /// `∂L^S/∂Ω^cold`; only the item tower's first `L−1` layers are non-zero.
    pub d_omega: NetParams,
    pub head: HeadGrads,
    /// Content rows only: behavior slots are fixed snapshots and the ID target
    /// is held constant.
    pub tables: TableGrads,
}

pub fn instructor_loss_grad(
    simulated: &[Simulated],
    tables: &EmbeddingTables,
    schema: &FeatureSchema,
    omega_cold: &NetParams,
    head: &InstructorHead,
) -> Result<Option<InstructorOutcome>, NumError> {
    let mut seen = HashSet::new();
    let items: Vec<&Simulated> = simulated
        .iter()
        .filter(|s| seen.insert(s.item_id))
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    let examples: Vec<Example> = items.iter().map(|s| s.example.clone()).collect();
    let id_table = &tables.item[schema.id_slot()];
    let mut target = Mat::zeros(items.len(), id_table.cols());
    for (k, s) in items.iter().enumerate() {
        target
            .row_mut(k)
            .copy_from_slice(EmbeddingTables::lookup(id_table, s.id_row));
    }

    let mut tape: Tape<f64> = Tape::new();
    let tn = net_on_tape(&mut tape, omega_cold, None)?;
    let (item_leaves, ei) = embed_items_on_tape(&mut tape, tables, &examples)?;
    let h = tower_hidden_tape(&mut tape, ei, &tn.item)?;
    let hw = tape.leaf(head.w.clone())?;
    let hb = tape.leaf(head.b.clone())?;
    let z = tape.linear(h, hw, hb)?;
    let loss = tape.mse_to_target(z, target)?;
    let g = tape.backward(loss)?;

    let mut table_grads = TableGrads::for_tables(tables);
    for (q, &leaf) in item_leaves.iter().enumerate() {
        if let Some(gm) = g.get(leaf) {
            for (k, ex) in examples.iter().enumerate() {
                if let Some(r) = ex.item_row(q) {
                    let r = if r < tables.item[q].rows() { r } else { 0 };
                    let entry = table_grads.item[q]
                        .entry(r)
                        .or_insert_with(|| vec![0.0; gm.cols()]);
                    for (a, &b) in entry.iter_mut().zip(gm.row(k)) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok(Some(InstructorOutcome {
        loss: tape.scalar(loss),
        n_items: items.len(),
        d_omega: tn.grads(&g, |x| x),
        head: HeadGrads {
            w: g.wrt(hw),
            b: g.wrt(hb),
        },
        tables: table_grads,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::central_differences;
    use crate::towers::{FeatureKind, FeatureSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            user: vec![FeatureSpec::new("user_id", 6, 3, FeatureKind::BehaviorId)],
            item: vec![
                FeatureSpec::new("item_id", 6, 3, FeatureKind::BehaviorId),
                FeatureSpec::new("pop_bucket", 4, 3, FeatureKind::BehaviorSeq),
                FeatureSpec::new("content_0", 5, 3, FeatureKind::Content),
            ],
        }
    }

    fn snap(x: f64) -> Snapshot {
        Snapshot {
            slots: vec![vec![x; 3], vec![x; 3]],
            period: 1,
        }
    }

    #[test]
    fn store_evicts_least_recently_written() {
        let mut st = SnapshotStore::new(2);
        st.put(1, snap(1.0));
        st.put(2, snap(2.0));
        st.put(1, snap(1.5));
        st.put(3, snap(3.0));
        assert!(st.contains(1) && st.contains(3) && !st.contains(2));
        assert_eq!(st.get(1).unwrap().slots[0][0], 1.5);
        assert_eq!(st.len(), 2);
        assert_eq!(st.writes(), 4);
        let order: Vec<u64> = st.items_by_age().map(|(id, _)| id).collect();
        assert_eq!(order, vec![1, 3]);
    }

    #[test]
    fn snapshot_then_simulate_swaps_only_behavior_slots() {
        let s = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tables = EmbeddingTables::init(&s, &mut rng);
        let cold = Example::new(vec![1], vec![2, 1, 3], 1.0);
        let mut st = SnapshotStore::new(10);
        st.snapshot_cold(&[(42, &cold)], &tables, &s, 4);
        assert_eq!(st.get(42).unwrap().period, 4);
        assert_eq!(st.get(42).unwrap().slots[0], tables.item[0].row(2).to_vec());

        let hot = Example::new(vec![5], vec![2, 3, 4], 0.0);
        let sims = simulate_hot(&[(42, &hot), (7, &hot)], &st, &s);
        assert_eq!(sims.len(), 1);
        let sim = &sims[0];
        assert_eq!(sim.id_row, 2);
        assert_eq!(sim.example.user, vec![5]);
        assert_eq!(
            sim.example.item[0],
            Slot::Fixed(tables.item[0].row(2).to_vec())
        );
        assert_eq!(
            sim.example.item[1],
            Slot::Fixed(tables.item[1].row(1).to_vec())
        );
        assert_eq!(sim.example.item[2], Slot::Row(4));

        let e = simulate_cold_embedding(42, &hot, &st, &tables, &s).unwrap();
        let mut expect = tables.item[0].row(2).to_vec();
        expect.extend_from_slice(tables.item[1].row(1));
        expect.extend_from_slice(tables.item[2].row(4));
        assert_eq!(e, expect);
        assert!(simulate_cold_embedding(7, &hot, &st, &tables, &s).is_none());
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 6.0);
        assert_eq!(total_loss(0.5, 0.0, 0.0, &w), 0.5);
    }

    #[test]
    fn instructor_loss_is_mean_squared_error() {
        assert_eq!(instructor_loss(&[1.0, 2.0], &[1.0, 0.0]).unwrap(), 2.0);
        assert!(instructor_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn instructor_grad_matches_forward_and_differences() {
        let s = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tables = EmbeddingTables::init(&s, &mut rng);
        let net = NetParams::init(&s, &[5], 4, &mut rng);
        let head = InstructorHead::init(5, 3, &mut rng);
        let mut st = SnapshotStore::new(10);
        let c1 = Example::new(vec![1], vec![1, 1, 2], 1.0);
        let c2 = Example::new(vec![2], vec![3, 2, 1], 1.0);
        st.snapshot_cold(&[(10, &c1), (30, &c2)], &tables, &s, 1);
        let h1 = Example::new(vec![3], vec![1, 3, 2], 1.0);
        let h2 = Example::new(vec![4], vec![3, 3, 3], 1.0);
        let sims = simulate_hot(&[(10, &h1), (30, &h2), (10, &h1)], &st, &s);
        let out = instructor_loss_grad(&sims, &tables, &s, &net, &head)
            .unwrap()
            .unwrap();
        assert_eq!(out.n_items, 2);

        let direct: f64 = sims[..2]
            .iter()
            .map(|sim| {
                let e = embed_item(&sim.example.item, &tables);
                let z = instructor_forward(&e, &net, &head).unwrap();
                instructor_loss(&z, tables.item[0].row(sim.id_row)).unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!((out.loss - direct).abs() < 1e-12);
        assert!(out.d_omega.user.layers.iter().all(|l| l.w.max_abs() == 0.0));
        assert!(out.d_omega.item.layers[1].w.max_abs() == 0.0);
        assert!(out.tables.item[0].is_empty() && out.tables.item[1].is_empty());

        let f = |p: &[Mat]| -> Result<f64, NumError> {
            let h = InstructorHead {
                w: p[0].clone(),
                b: p[1].clone(),
            };
            let o = instructor_loss_grad(&sims, &tables, &s, &net, &h)?.unwrap();
            Ok(o.loss)
        };
        let num = central_differences(f, &[head.w.clone(), head.b.clone()], 1e-6).unwrap();
        let err =
            crate::numcore::max_relative_error(&[out.head.w.clone(), out.head.b.clone()], &num);
        assert!(err < 1e-5, "{err}");
    }
}
