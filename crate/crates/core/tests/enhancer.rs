mod common;

use std::collections::HashSet;

use common::{net_bits, records, state, tables_bits, two_tasks, N_ITEMS};
use pam::enhancer::{
    instructor_loss, instructor_loss_grad, simulate_cold_embedding, simulate_hot, LossWeights,
    Snapshot, SnapshotStore,
};
use pam::harness::{run_on_stream, ExperimentConfig, PamTrainer, StreamData, Variant};
use pam::towers::{EmbeddingTables, Example, Slot};
use proptest::prelude::*;

fn snap(x: f64) -> Snapshot {
    Snapshot {
        slots: vec![vec![x; 3], vec![x; 3]],
        period: 1,
    }
}

proptest! {
    #[test]
    fn store_matches_a_reference_lru(ops in prop::collection::vec(0u64..12, 0..80), cap in 1usize..6) {
        let mut store = SnapshotStore::new(cap);
        let mut model: Vec<u64> = Vec::new();
        for (k, &id) in ops.iter().enumerate() {
            store.put(id, snap(k as f64));
            model.retain(|&x| x != id);
            if model.len() == cap {
                model.remove(0);
            }
            model.push(id);
            prop_assert!(store.len() <= cap);
        }
        let order: Vec<u64> = store.items_by_age().map(|(id, _)| id).collect();
        prop_assert_eq!(order, model);
        prop_assert_eq!(store.writes(), ops.len() as u64);
    }

    #[test]
    fn simulated_embedding_is_the_slotwise_concatenation(seed: u64, cold_rows in (1usize..=N_ITEMS, 1usize..6), hot_rows in (1usize..=N_ITEMS, 1usize..6, 1usize..5)) {
        let st = state(seed, 0.1, 0.001);
        let s = common::schema(3);
        let cold = Example::new(vec![1], vec![cold_rows.0, cold_rows.1, 2], 1.0);
        let hot = Example::new(vec![2], vec![hot_rows.0, hot_rows.1, hot_rows.2], 1.0);
        let mut store = SnapshotStore::new(8);
        store.snapshot_cold(&[(7, &cold)], &st.tables, &s, 3);
        let got = simulate_cold_embedding(7, &hot, &store, &st.tables, &s).unwrap();
        let mut expect = st.tables.item[0].row(cold_rows.0).to_vec();
        expect.extend_from_slice(st.tables.item[1].row(cold_rows.1));
        expect.extend_from_slice(st.tables.item[2].row(hot_rows.2));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&got), bits(&expect));
        prop_assert!(simulate_cold_embedding(8, &hot, &store, &st.tables, &s).is_none());
    }

    #[test]
    fn instructor_loss_is_non_negative_and_zero_only_on_the_target(
        z in prop::collection::vec(-5.0f64..5.0, 1..16),
        shift in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let e: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let l = instructor_loss(&z, &e).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(instructor_loss(&z, &z).unwrap(), 0.0);
        prop_assert_eq!(l == 0.0, z == e);
    }
}

#[test]
fn snapshots_hold_only_behavior_slots_of_cold_items() {
    let spec = two_tasks();
    let cfg = ExperimentConfig {
        tasks: spec.clone(),
        ..ExperimentConfig::default()
    };
    let s = common::schema(3);
    let mut tr = PamTrainer::new(
        state(5, 0.05, 0.01),
        s.clone(),
        LossWeights::default(),
        2,
        64,
    );
    let mut cold_seen = HashSet::new();
    for b in 0..6 {
        let batch = records(100 + b, 40, &spec);
        cold_seen.extend(batch.iter().filter(|r| r.task == 1).map(|r| r.item_id));
        let before = tr.state.tables.clone();
        tr.step(&batch, &cfg).unwrap();
        let mut latest = HashSet::new();
        for r in batch
            .iter()
            .rev()
            .filter(|r| r.task == 1 && latest.insert(r.item_id))
        {
            let snap = tr.store.get(r.item_id).unwrap();
            assert_eq!(snap.slots.len(), 2);
            let rows: Vec<usize> = (0..2).map(|q| r.example.item_row(q).unwrap()).collect();
            assert_eq!(
                snap.slots[0],
                EmbeddingTables::lookup(&before.item[0], rows[0])
            );
            assert_eq!(
                snap.slots[1],
                EmbeddingTables::lookup(&before.item[1], rows[1])
            );
        }
    }
    let stored: HashSet<u64> = tr.store.items_by_age().map(|(id, _)| id).collect();
    assert!(!stored.is_empty());
    assert!(stored.is_subset(&cold_seen));
}

#[test]
fn instructor_sends_no_gradient_to_id_or_sequence_rows() {
    let spec = two_tasks();
    let s = common::schema(3);
    let st = state(8, 0.1, 0.001);
    let batch = records(21, 60, &spec);
    let cold: Vec<(u64, &Example)> = batch
        .iter()
        .filter(|r| r.task == 1)
        .map(|r| (r.item_id, &r.example))
        .collect();
    let mut store = SnapshotStore::new(32);
    store.snapshot_cold(&cold, &st.tables, &s, 1);
    // Popular interactions of the same items, re-labelled as hot.
    let hot: Vec<(u64, Example)> = cold
        .iter()
        .map(|&(id, ex)| {
            let mut e = ex.clone();
            e.item[1] = Slot::Row(5);
            (id, e)
        })
        .collect();
    let hot_refs: Vec<(u64, &Example)> = hot.iter().map(|(id, e)| (*id, e)).collect();
    let sims = simulate_hot(&hot_refs, &store, &s);
    assert_eq!(sims.len(), hot.len());
    let out = instructor_loss_grad(&sims, &st.tables, &s, &st.theta, &st.head)
        .unwrap()
        .unwrap();
    assert!(out.loss > 0.0);
    assert!(out.tables.item[0].is_empty());
    assert!(out.tables.item[1].is_empty());
    assert!(out.tables.user.iter().all(|g| g.is_empty()));
    assert!(!out.tables.item[2].is_empty());
}

fn small_config(variant: Variant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "synth_items=300",
        "synth_users=120",
        "synth_interactions=6000",
        "train_batch=256",
        "eval_batch=128",
    ])
    .unwrap();
    cfg.variant = variant;
    cfg
}

#[test]
fn zero_enhancer_weights_reproduce_the_meta_only_run_bitwise() {
    let base = small_config(Variant::PamM);
    let stream = StreamData::load(&base).unwrap();
    let m = run_on_stream(&base, &stream).unwrap();
    let mut zeroed = small_config(Variant::PamF);
    zeroed.gamma.instructor = 0.0;
    zeroed.gamma.augmentation = 0.0;
    let f = run_on_stream(&zeroed, &stream).unwrap();
    assert_eq!(tables_bits(&m.state.tables), tables_bits(&f.state.tables));
    assert_eq!(net_bits(&m.state.theta), net_bits(&f.state.theta));
    assert_eq!(m.state.rates, f.state.rates);
    let losses = |r: &pam::harness::RunOutput| -> Vec<u64> {
        r.trace
            .iter()
            .flat_map(|t| t.batch_losses.iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(losses(&m), losses(&f));
    assert_eq!(f.store.writes(), 0);
    assert_eq!(
        f.counters.instructor_losses + f.counters.augmentation_losses,
        0
    );
}
