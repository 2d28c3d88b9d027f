mod common;

use common::{net_bits, records, state, tables_bits, two_tasks};
use pam::enhancer::LossWeights;
use pam::harness::{ExperimentConfig, PamTrainer};
use pam::meta::{local_update, meta_loss, run_task, LslrRates, MetaGrads, TaskSpec};
use pam::towers::Example;
use proptest::prelude::*;

fn cfg(spec: TaskSpec) -> ExperimentConfig {
    ExperimentConfig {
        tasks: spec,
        ..ExperimentConfig::default()
    }
}

fn meta_only() -> LossWeights {
    LossWeights {
        meta: 1.0,
        instructor: 0.0,
        augmentation: 0.0,
    }
}

fn grads_for(spec: TaskSpec, beta: f64) -> (MetaGrads, pam::meta::MetaState) {
    let st = state(4, 0.05, beta);
    let schema = common::schema(3);
    let n = spec.n_tasks();
    let batch = records(9, 40, &spec);
    let c = cfg(spec);
    let mut tr = PamTrainer::new(st, schema, meta_only(), n, 16);
    let (g, _) = tr.compute_grads(&batch, &c).unwrap().unwrap();
    (g, tr.state)
}

fn flat(g: &MetaGrads) -> Vec<f64> {
    g.theta
        .tensors()
        .into_iter()
        .flat_map(|m| m.as_slice().to_vec())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn scaling_task_weights_against_outer_rate_keeps_the_update_direction() {
    let c = 7.5;
    let base = two_tasks();
    let mut scaled = base.clone();
    for w in &mut scaled.weights {
        *w *= c;
    }
    let beta = 0.01;
    let (g1, mut s1) = grads_for(base, beta);
    let (gc, mut sc) = grads_for(scaled, beta / c);
    for (a, b) in flat(&g1).iter().zip(flat(&gc)) {
        assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} {b}");
    }
    let before = flat_theta(&s1);
    s1.global_update(&g1).unwrap();
    sc.global_update(&gc).unwrap();
    let d1: Vec<f64> = flat_theta(&s1)
        .iter()
        .zip(&before)
        .map(|(x, y)| x - y)
        .collect();
    let dc: Vec<f64> = flat_theta(&sc)
        .iter()
        .zip(&before)
        .map(|(x, y)| x - y)
        .collect();
    assert!(cosine(&d1, &dc) > 1.0 - 1e-6, "cosine {}", cosine(&d1, &dc));
}

fn flat_theta(s: &pam::meta::MetaState) -> Vec<f64> {
    s.theta
        .tensors()
        .into_iter()
        .flat_map(|m| m.as_slice().to_vec())
        .collect()
}

#[test]
fn local_update_leaves_shared_parameters_untouched() {
    let st = state(2, 0.3, 0.001);
    let spec = two_tasks();
    let ex: Vec<Example> = records(3, 30, &spec)
        .into_iter()
        .map(|r| r.example)
        .collect();
    let (t0, n0) = (tables_bits(&st.tables), net_bits(&st.theta));
    let up = local_update(&st.theta, &st.rates, &st.tables, &ex, 0.2).unwrap();
    assert_eq!(tables_bits(&st.tables), t0);
    assert_eq!(net_bits(&st.theta), n0);
    assert_ne!(net_bits(&up.omega), n0);
    let run = run_task(&st.theta, &st.rates, &st.tables, &ex, 0.5, 0.2)
        .unwrap()
        .unwrap();
    assert_eq!(run.support.len() + run.query.len(), ex.len());
    assert_eq!(net_bits(&st.theta), n0);
}

#[test]
fn zero_rates_make_the_local_update_the_identity() {
    let st = state(2, 0.0, 0.001);
    let ex: Vec<Example> = records(3, 20, &two_tasks())
        .into_iter()
        .map(|r| r.example)
        .collect();
    let rates = LslrRates::constant(0.0, st.theta.n_tensors(), 1);
    let up = local_update(&st.theta, &rates, &st.tables, &ex, 0.2).unwrap();
    assert_eq!(net_bits(&up.omega), net_bits(&st.theta));
}

#[test]
fn zero_outer_rate_changes_nothing_and_rates_stay_non_negative() {
    let spec = two_tasks();
    let (g, st) = grads_for(spec.clone(), 0.0);
    let mut frozen = st.clone();
    frozen.global_update(&g).unwrap();
    assert_eq!(tables_bits(&frozen.tables), tables_bits(&st.tables));
    assert_eq!(net_bits(&frozen.theta), net_bits(&st.theta));
    assert_eq!(frozen.rates, st.rates);

    let mut pushed = pam::meta::MetaState::from_parts(
        st.tables.clone(),
        st.theta.clone(),
        LslrRates::constant(1e-4, st.theta.n_tensors(), 1),
        st.head.clone(),
        1e-4,
        0.5,
        true,
    );
    let mut g = MetaGrads::zeros(&pushed);
    for r in &mut g.rates.steps[0] {
        *r = 10.0;
    }
    pushed.global_update(&g).unwrap();
    assert!(pushed.rates.steps[0].iter().all(|&r| r >= 0.0));
}

proptest! {
    #[test]
    fn tasks_follow_the_threshold_count(v in 0u64..100_000, v_cold in 1u64..200, n in 1usize..6) {
        let spec = TaskSpec::geometric(v_cold, n);
        let expected = 1 + spec.thresholds.iter().filter(|&&c| v >= c).count();
        prop_assert_eq!(spec.assign_task(v), expected);
        prop_assert!(spec.assign_task(v) <= spec.assign_task(v + 1));
        prop_assert_eq!(spec.assign_task(v) == 1, v < v_cold || n == 1);
    }

    #[test]
    fn meta_loss_is_the_weighted_sum(ls in prop::collection::vec(prop::option::of(0.0f64..10.0), 5)) {
        let spec = TaskSpec::geometric(50, 5);
        let expected: f64 = ls.iter().zip(&spec.weights).filter_map(|(l, w)| l.map(|l| l * w)).sum();
        match meta_loss(&ls, &spec) {
            Ok(v) => prop_assert!((v - expected).abs() < 1e-12),
            Err(_) => prop_assert!(ls.iter().all(Option::is_none)),
        }
    }
}
