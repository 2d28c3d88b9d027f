#![allow(dead_code)]

use pam::meta::{Architecture, MetaState, TaskSpec};
use pam::serve_eval::{EvalRecord, ParamRegistry};
use pam::towers::{
    embed_item, embed_user, EmbeddingTables, Example, FeatureKind, FeatureSchema, FeatureSpec,
    NetParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_USERS: usize = 12;
pub const N_ITEMS: usize = 10;

/// user id; item id, popularity bucket, tag.
pub fn schema(d: usize) -> FeatureSchema {
    FeatureSchema {
        user: vec![FeatureSpec::new(
            "user_id",
            N_USERS + 1,
            d,
            FeatureKind::BehaviorId,
        )],
        item: vec![
            FeatureSpec::new("item_id", N_ITEMS + 1, d, FeatureKind::BehaviorId),
            FeatureSpec::new("pop", 6, d, FeatureKind::BehaviorSeq),
            FeatureSpec::new("tag", 5, d, FeatureKind::Content),
        ],
    }
}

pub fn arch() -> Architecture {
    Architecture {
        hidden: vec![6],
        out_dim: 4,
    }
}

pub fn two_tasks() -> TaskSpec {
    TaskSpec {
        thresholds: vec![3],
        weights: vec![2.0, 0.5],
    }
}

/// A state whose tables are large enough for non-trivial gradients.
pub fn state(seed: u64, alpha: f64, beta: f64) -> MetaState {
    let s = schema(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = MetaState::init(&s, &arch(), alpha, beta, 1, true, &mut rng);
    for t in st.tables.tables_mut() {
        t.scale(30.0);
    }
    st
}

/// Items `1..=N_ITEMS/2` are cold (views < 3), the rest popular.
pub fn records(seed: u64, n: usize, spec: &TaskSpec) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let item = rng.random_range(1..=N_ITEMS);
            let views = if item <= N_ITEMS / 2 {
                rng.random_range(0..3)
            } else {
                rng.random_range(3..40)
            };
            let example = Example::new(
                vec![rng.random_range(1..=N_USERS)],
                vec![item, 1 + (views as usize).min(4), 1 + item % 4],
                f64::from(u8::from(rng.random_bool(0.8))),
            );
            EvalRecord {
                item_id: item as u64,
                example,
                views,
                task: spec.assign_task(views),
            }
        })
        .collect()
}

pub fn tables_bits(t: &EmbeddingTables) -> Vec<u64> {
    t.tables()
        .flat_map(|m| m.as_slice().iter().map(|x| x.to_bits()))
        .collect()
}

pub fn net_bits(n: &NetParams) -> Vec<u64> {
    n.tensors()
        .into_iter()
        .flat_map(|m| m.as_slice().iter().map(|x| x.to_bits()))
        .collect()
}

/// Cold and popular ranks of every served positive, recomputed by sorting the
/// candidate pool instead of counting.
pub fn oracle_ranks(
    period: usize,
    records: &[EvalRecord],
    tables: &EmbeddingTables,
    registry: &ParamRegistry,
    batch_size: usize,
) -> (Vec<usize>, Vec<usize>, usize) {
    let (mut cold, mut popular, mut skipped) = (Vec::new(), Vec::new(), 0);
    for batch in records.chunks(batch_size) {
        let mut users: Vec<Vec<usize>> = Vec::new();
        for r in batch {
            if !users.contains(&r.example.user) {
                users.push(r.example.user.clone());
            }
        }
        for r in batch.iter().filter(|r| r.example.label > 0.5) {
            let Some((_, net)) = registry.latest_before(period, r.task) else {
                skipped += 1;
                continue;
            };
            let zi = net
                .item
                .forward(&embed_item(&r.example.item, tables))
                .unwrap();
            let pool: Vec<&Vec<usize>> = users
                .iter()
                .filter(|u| {
                    **u == r.example.user
                        || !batch
                            .iter()
                            .any(|o| o.item_id == r.item_id && o.example.user == **u)
                })
                .collect();
            let mut scored: Vec<(usize, f64)> = pool
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let zu = net.user.forward(&embed_user(u, tables)).unwrap();
                    (k, zu.iter().zip(&zi).map(|(a, b)| a * b).sum())
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let me = pool.iter().position(|u| **u == r.example.user).unwrap();
            let rank = 1 + scored.iter().position(|&(k, _)| k == me).unwrap();
            if r.task == 1 {
                cold.push(rank);
            } else {
                popular.push(rank);
            }
        }
    }
    (cold, popular, skipped)
}

/// Recall@K and NDCG@K from a list of ranks.
pub fn oracle_metrics(ranks: &[usize], k: usize) -> (f64, f64) {
    let n = ranks.len() as f64;
    let recall = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 } else { 0.0 })
        .sum::<f64>()
        / n;
    let ndcg = ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n;
    (recall, ndcg)
}

/// Random records over `n_users` users whose embeddings take only a few
/// distinct values, so score ties are common.
pub fn eval_fixture(
    seed: u64,
    n: usize,
    n_users: usize,
) -> (FeatureSchema, EmbeddingTables, NetParams, Vec<EvalRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = FeatureSchema {
        user: vec![FeatureSpec::new(
            "user_id",
            n_users + 1,
            3,
            FeatureKind::BehaviorId,
        )],
        item: vec![
            FeatureSpec::new("item_id", N_ITEMS + 1, 3, FeatureKind::BehaviorId),
            FeatureSpec::new("tag", 5, 3, FeatureKind::Content),
        ],
    };
    let mut tables = EmbeddingTables::init(&s, &mut rng);
    for m in tables.tables_mut() {
        m.scale(50.0);
    }
    let protos: Vec<Vec<f64>> = (0..4).map(|k| tables.user[0].row(k + 1).to_vec()).collect();
    for u in 1..=n_users {
        tables.user[0].row_mut(u).copy_from_slice(&protos[u % 4]);
    }
    let net = NetParams::init(&s, &[5], 3, &mut rng);
    let records = (0..n)
        .map(|_| {
            let item = rng.random_range(1..=N_ITEMS);
            let views = rng.random_range(0..20);
            EvalRecord {
                item_id: item as u64,
                example: Example::new(
                    vec![rng.random_range(1..=n_users)],
                    vec![item, 1 + item % 4],
                    f64::from(u8::from(rng.random_bool(0.7))),
                ),
                views,
                task: 1 + usize::from(views >= 5) + usize::from(views >= 15),
            }
        })
        .collect();
    (s, tables, net, records)
}
