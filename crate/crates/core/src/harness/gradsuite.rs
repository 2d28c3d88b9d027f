//! Randomized finite-difference audit of every trained gradient.
//!
//! Each configuration draws a small schema, towers, tables and batch, then
//! compares analytic gradients against central differences:
//!
//! * `L_T` with respect to the network and all tables;
//! * `L^S` with respect to `Ω^cold`, the head and all tables, with the ID
//!   target held at its current value;
//! * `L^A` and `L^T` as assembled by the trainer in first-order mode, against
//!   the surrogate in which every inner-step gradient is a constant (so
//!   `Ω = Θ − r ⊙ g₀` is affine in `Θ` and `r`);
//! * the exact bi-level gradient on a scalar toy, against the true nested
//!   objective.
//!
//! Errors are tensor-wise (`‖a − n‖∞ / ‖n‖∞`). A draw whose central
//! differences change by more than 1e-3 between step sizes sits on a ReLU
//! kink and is redrawn; a draw without both a cold and a popular task has no
//! enhancer terms and is skipped.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ExperimentConfig, PamTrainer};
use crate::datastream::split_support_query;
use crate::enhancer::{
    instructor_forward, instructor_loss, instructor_loss_grad, simulate_hot, InstructorHead,
    LossWeights, SnapshotStore,
};
use crate::meta::{
    local_update, run_task, LslrRates, MetaError, MetaGradMode, MetaGrads, MetaState, TaskSpec,
};
use crate::numcore::{central_differences, max_tensor_error, Mat, NumError};
use crate::serve_eval::EvalRecord;
use crate::towers::{
    embed_item, task_loss, task_loss_grad, EmbeddingTables, Example, FeatureKind, FeatureSchema,
    FeatureSpec, NetParams, TableGrads,
};

pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const EXACT_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;
const EPS_FINE: f64 = 1e-6;
const KINK_TOL: f64 = 1e-3;
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    pub redrawn: usize,
    pub skipped: usize,
    pub task_loss: f64,
    pub instructor: f64,
    pub augmentation: f64,
    pub total_first_order: f64,
    pub exact_toy: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.task_loss < FIRST_ORDER_TOL
            && self.instructor < FIRST_ORDER_TOL
            && self.augmentation < FIRST_ORDER_TOL
            && self.total_first_order < FIRST_ORDER_TOL
            && self.exact_toy < EXACT_TOL
    }
}

/// Worst relative error, or `None` when `f` is not smooth at `point`.
fn compare<F>(analytic: &[Mat], point: &[Mat], f: F) -> Result<Option<f64>, NumError>
where
    F: Fn(&[Mat]) -> Result<f64, NumError>,
{
    let num = central_differences(&f, point, EPS)?;
    let err = max_tensor_error(analytic, &num);
    if err < FIRST_ORDER_TOL {
        return Ok(Some(err));
    }
    let fine = central_differences(&f, point, EPS_FINE)?;
    if max_tensor_error(&fine, &num) > KINK_TOL {
        return Ok(None);
    }
    Ok(Some(err))
}

fn dense(g: &TableGrads, tables: &EmbeddingTables) -> Vec<Mat> {
    let part = |rows: &[crate::towers::SparseRows], ts: &[Mat]| -> Vec<Mat> {
        rows.iter()
            .zip(ts)
            .map(|(sparse, t)| {
                let mut m = Mat::zeros(t.rows(), t.cols());
                for (&r, v) in sparse {
                    m.row_mut(r).copy_from_slice(v);
                }
                m
            })
            .collect()
    };
    let mut out = part(&g.user, &tables.user);
    out.extend(part(&g.item, &tables.item));
    out
}

/// Flat view of every trainable family, in a fixed order.
#[derive(Debug, Clone)]
struct Params {
    theta: NetParams,
    tables: EmbeddingTables,
    head: InstructorHead,
    rates: LslrRates,
}

impl Params {
    fn pack(&self) -> Vec<Mat> {
        let mut v: Vec<Mat> = self.theta.tensors().into_iter().cloned().collect();
        v.extend(self.tables.tables().cloned());
        v.push(self.head.w.clone());
        v.push(self.head.b.clone());
        v.extend(self.rates.steps.iter().map(|s| Mat::row_vector(s.clone())));
        v
    }

    fn unpack(&self, flat: &[Mat]) -> Params {
        let mut p = self.clone();
        let mut it = flat.iter();
        for t in p.theta.tensors_mut() {
            *t = it.next().expect("theta").clone();
        }
        for t in p.tables.tables_mut() {
            *t = it.next().expect("tables").clone();
        }
        p.head.w = it.next().expect("head w").clone();
        p.head.b = it.next().expect("head b").clone();
        for s in &mut p.rates.steps {
            *s = it.next().expect("rates").as_slice().to_vec();
        }
        p
    }

    fn grads(&self, g: &MetaGrads) -> Vec<Mat> {
        let mut v: Vec<Mat> = g.theta.tensors().into_iter().cloned().collect();
        v.extend(dense(&g.tables, &self.tables));
        v.push(g.head.w.clone());
        v.push(g.head.b.clone());
        v.extend(g.rates.steps.iter().map(|s| Mat::row_vector(s.clone())));
        v
    }
}

fn uniform_tables<R: Rng>(schema: &FeatureSchema, rng: &mut R) -> EmbeddingTables {
    let mut t = EmbeddingTables::init(schema, rng);
    for m in t.tables_mut() {
        let cols = m.cols();
        for (k, x) in m.as_mut_slice().iter_mut().enumerate() {
            *x = if k < cols {
                0.0
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    t
}

struct Draw {
    schema: FeatureSchema,
    params: Params,
    records: Vec<EvalRecord>,
    cfg: ExperimentConfig,
}

const USERS: usize = 5;
const ITEMS: usize = 4;

fn draw<R: Rng>(rng: &mut R) -> Draw {
    let d = rng.random_range(1..=8);
    let schema = FeatureSchema {
        user: vec![FeatureSpec::new(
            "user_id",
            USERS + 1,
            d,
            FeatureKind::BehaviorId,
        )],
        item: vec![
            FeatureSpec::new("item_id", ITEMS + 1, d, FeatureKind::BehaviorId),
            FeatureSpec::new("pop_bucket", 4, d, FeatureKind::BehaviorSeq),
            FeatureSpec::new("content_0", 4, d, FeatureKind::Content),
        ],
    };
    let hidden: Vec<usize> = if rng.random_bool(0.5) {
        vec![rng.random_range(1..=8)]
    } else {
        Vec::new()
    };
    let out_dim = rng.random_range(1..=8);
    let tables = uniform_tables(&schema, rng);
    let theta = NetParams::init(&schema, &hidden, out_dim, rng);
    let head_in = hidden.last().copied().unwrap_or_else(|| schema.item_dim());
    let head = InstructorHead::init(head_in, d, rng);
    let rates = LslrRates {
        steps: vec![(0..theta.n_tensors())
            .map(|_| rng.random_range(0.01..0.3))
            .collect()],
    };
    let n = rng.random_range(4..=16);
    let records = (0..n)
        .map(|_| {
            let item = rng.random_range(1..=ITEMS);
            let views = rng.random_range(0..6u64);
            EvalRecord {
                item_id: item as u64,
                example: Example::new(
                    vec![rng.random_range(1..=USERS)],
                    vec![item, rng.random_range(1..4), rng.random_range(1..4)],
                    f64::from(rng.random_range(0..2u8)),
                ),
                views,
                task: if views < 3 { 1 } else { 2 },
            }
        })
        .collect();
    let cfg = ExperimentConfig {
        tasks: TaskSpec {
            thresholds: vec![3],
            weights: vec![2.0, 0.5],
        },
        meta_grad: MetaGradMode::FirstOrder,
        ..ExperimentConfig::default()
    };
    Draw {
        schema,
        params: Params {
            theta,
            tables,
            head,
            rates,
        },
        records,
        cfg,
    }
}

fn trainer_for(d: &Draw, weights: LossWeights, learn_rates: bool) -> PamTrainer {
    let p = &d.params;
    let state = MetaState::from_parts(
        p.tables.clone(),
        p.theta.clone(),
        p.rates.clone(),
        p.head.clone(),
        0.0,
        0.0,
        learn_rates,
    );
    PamTrainer::new(state, d.schema.clone(), weights, d.cfg.tasks.n_tasks(), 64)
}

fn examples(rs: &[&EvalRecord]) -> Vec<Example> {
    rs.iter().map(|r| r.example.clone()).collect()
}

fn l_t_error(d: &Draw) -> Result<Option<f64>, NumError> {
    let ex: Vec<Example> = d.records.iter().map(|r| r.example.clone()).collect();
    let p = &d.params;
    let g = task_loss_grad(&p.tables, &p.theta, &ex, d.cfg.tau)?;
    let mut analytic: Vec<Mat> = g.net.tensors().into_iter().cloned().collect();
    analytic.extend(dense(&g.tables, &p.tables));
    let mut point: Vec<Mat> = p.theta.tensors().into_iter().cloned().collect();
    point.extend(p.tables.tables().cloned());
    let nt = p.theta.n_tensors();
    compare(&analytic, &point, |flat| {
        let mut net = p.theta.clone();
        for (t, v) in net.tensors_mut().into_iter().zip(&flat[..nt]) {
            *t = v.clone();
        }
        let mut tables = p.tables.clone();
        for (t, v) in tables.tables_mut().zip(&flat[nt..]) {
            *t = v.clone();
        }
        task_loss(&tables, &net, &ex, d.cfg.tau)
    })
}

/// Snapshots the cold records and simulates the popular ones.
fn simulated(d: &Draw) -> Vec<crate::enhancer::Simulated> {
    let mut store = SnapshotStore::new(64);
    let cold: Vec<_> = d
        .records
        .iter()
        .filter(|r| r.task == 1)
        .map(|r| (r.item_id, &r.example))
        .collect();
    store.snapshot_cold(&cold, &d.params.tables, &d.schema, 1);
    let hot: Vec<_> = d
        .records
        .iter()
        .filter(|r| r.task > 1)
        .map(|r| (r.item_id, &r.example))
        .collect();
    simulate_hot(&hot, &store, &d.schema)
}

fn l_s_error(d: &Draw) -> Result<Option<Option<f64>>, NumError> {
    let sims = simulated(d);
    let p = &d.params;
    let Some(out) = instructor_loss_grad(&sims, &p.tables, &d.schema, &p.theta, &p.head)? else {
        return Ok(None);
    };
    let id_slot = d.schema.id_slot();
    let mut seen = std::collections::HashSet::new();
    let distinct: Vec<_> = sims.iter().filter(|s| seen.insert(s.item_id)).collect();
    let targets: Vec<Vec<f64>> = distinct
        .iter()
        .map(|s| EmbeddingTables::lookup(&p.tables.item[id_slot], s.id_row).to_vec())
        .collect();
    let mut analytic: Vec<Mat> = out.d_omega.tensors().into_iter().cloned().collect();
    analytic.extend(dense(&out.tables, &p.tables));
    analytic.push(out.head.w.clone());
    analytic.push(out.head.b.clone());
    let mut point: Vec<Mat> = p.theta.tensors().into_iter().cloned().collect();
    point.extend(p.tables.tables().cloned());
    point.push(p.head.w.clone());
    point.push(p.head.b.clone());
    let nt = p.theta.n_tensors();
    let n_tab = p.tables.user.len() + p.tables.item.len();
    compare(&analytic, &point, |flat| {
        let mut omega = p.theta.clone();
        for (t, v) in omega.tensors_mut().into_iter().zip(&flat[..nt]) {
            *t = v.clone();
        }
        let mut tables = p.tables.clone();
        for (t, v) in tables.tables_mut().zip(&flat[nt..nt + n_tab]) {
            *t = v.clone();
        }
        let head = InstructorHead {
            w: flat[nt + n_tab].clone(),
            b: flat[nt + n_tab + 1].clone(),
        };
        let mut sum = 0.0;
        for (s, target) in distinct.iter().zip(&targets) {
            let z = instructor_forward(&embed_item(&s.example.item, &tables), &omega, &head)?;
            sum += instructor_loss(&z, target)?;
        }
        Ok(sum / distinct.len() as f64)
    })
    .map(Some)
}

/// `L^T` with every inner-step gradient frozen at its value at the base
/// point: the function whose gradient first-order mode computes exactly.
fn surrogate(
    d: &Draw,
    weights: &LossWeights,
    trainer_store: &SnapshotStore,
    at: &Params,
) -> Result<f64, NumError> {
    let cfg = &d.cfg;
    let base = &d.params;
    let adapt = |support: &[Example],
                 theta: &NetParams,
                 rates: &LslrRates|
     -> Result<NetParams, NumError> {
        let g0 = local_update(&base.theta, &base.rates, &base.tables, support, cfg.tau)
            .map_err(|e| match e {
                MetaError::Num(n) => n,
                _ => NumError::EmptyTape,
            })?
            .step_grads
            .remove(0);
        let mut step = g0;
        step.scale_tensors(&rates.steps[0]);
        let mut omega = theta.clone();
        omega.axpy(-1.0, &step)?;
        Ok(omega)
    };
    let mut total = 0.0;
    let mut omega_cold = None;
    for n in 1..=cfg.tasks.n_tasks() {
        let rs: Vec<&EvalRecord> = d.records.iter().filter(|r| r.task == n).collect();
        let ex = examples(&rs);
        let (s, q) = split_support_query(&ex, cfg.ratio);
        if s.is_empty() || q.is_empty() {
            continue;
        }
        let omega = adapt(s, &at.theta, &at.rates)?;
        total += weights.meta * cfg.tasks.weight(n) * task_loss(&at.tables, &omega, q, cfg.tau)?;
        if n == 1 {
            omega_cold = Some(omega);
        }
    }
    let hot: Vec<_> = d
        .records
        .iter()
        .filter(|r| r.task > 1)
        .map(|r| (r.item_id, &r.example))
        .collect();
    let sims = simulate_hot(&hot, trainer_store, &d.schema);
    if weights.instructor > 0.0 {
        if let Some(omega) = &omega_cold {
            let mut seen = std::collections::HashSet::new();
            let distinct: Vec<_> = sims.iter().filter(|s| seen.insert(s.item_id)).collect();
            if !distinct.is_empty() {
                let id_table = &base.tables.item[d.schema.id_slot()];
                let mut sum = 0.0;
                for s in &distinct {
                    let z = instructor_forward(
                        &embed_item(&s.example.item, &at.tables),
                        omega,
                        &at.head,
                    )?;
                    sum += instructor_loss(&z, EmbeddingTables::lookup(id_table, s.id_row))?;
                }
                total += weights.instructor * sum / distinct.len() as f64;
            }
        }
    }
    if weights.augmentation > 0.0 {
        let ex: Vec<Example> = sims.iter().map(|s| s.example.clone()).collect();
        let (s, q) = split_support_query(&ex, cfg.ratio);
        if !s.is_empty() && !q.is_empty() {
            let omega = adapt(s, &at.theta, &at.rates)?;
            total += weights.augmentation * task_loss(&at.tables, &omega, q, cfg.tau)?;
        }
    }
    Ok(total)
}

/// Trainer gradient vs. the frozen-inner-gradient surrogate. `None` when the
/// draw lacks the enhancer terms `weights` asks for.
fn trainer_error(d: &Draw, weights: LossWeights) -> Result<Option<Option<f64>>, MetaError> {
    let mut trainer = trainer_for(d, weights, true);
    let Some((grads, out)) = trainer.compute_grads(&d.records, &d.cfg)? else {
        return Ok(None);
    };
    if (weights.instructor > 0.0 && out.instructor.is_none())
        || (weights.augmentation > 0.0 && out.augmentation.is_none())
    {
        return Ok(None);
    }
    let analytic = d.params.grads(&grads);
    let point = d.params.pack();
    let store = trainer.store.clone();
    Ok(Some(compare(&analytic, &point, |flat| {
        surrogate(d, &weights, &store, &d.params.unpack(flat))
    })?))
}

/// Exact meta-gradient on a one-dimensional, single-task problem.
fn exact_toy_error<R: Rng>(rng: &mut R) -> Result<Option<f64>, MetaError> {
    let schema = FeatureSchema {
        user: vec![FeatureSpec::new(
            "user_id",
            USERS + 1,
            1,
            FeatureKind::BehaviorId,
        )],
        item: vec![FeatureSpec::new(
            "item_id",
            ITEMS + 1,
            1,
            FeatureKind::BehaviorId,
        )],
    };
    let tables = uniform_tables(&schema, rng);
    let mut theta = NetParams::init(&schema, &[], 1, rng);
    for t in theta.tensors_mut() {
        for x in t.as_mut_slice() {
            *x = rng.random_range(-1.5..1.5);
        }
    }
    let rates = LslrRates {
        steps: vec![(0..theta.n_tensors())
            .map(|_| rng.random_range(0.05..0.5))
            .collect()],
    };
    let n = rng.random_range(4..=8);
    let records: Vec<EvalRecord> = (0..n)
        .map(|_| {
            let item = rng.random_range(1..=ITEMS);
            EvalRecord {
                item_id: item as u64,
                example: Example::new(
                    vec![rng.random_range(1..=USERS)],
                    vec![item],
                    f64::from(rng.random_range(0..2u8)),
                ),
                views: 0,
                task: 1,
            }
        })
        .collect();
    let cfg = ExperimentConfig {
        tasks: TaskSpec::single(),
        meta_grad: MetaGradMode::Exact,
        tau: 1.0,
        ..ExperimentConfig::default()
    };
    let params = Params {
        theta,
        tables,
        head: InstructorHead::init(1, 1, rng),
        rates,
    };
    let d = Draw {
        schema,
        params,
        records,
        cfg,
    };
    let weights = LossWeights {
        meta: 1.0,
        instructor: 0.0,
        augmentation: 0.0,
    };
    let mut trainer = trainer_for(&d, weights, true);
    let Some((grads, _)) = trainer.compute_grads(&d.records, &d.cfg)? else {
        return Ok(None);
    };
    let analytic = d.params.grads(&grads);
    let point = d.params.pack();
    let ex: Vec<Example> = d.records.iter().map(|r| r.example.clone()).collect();
    let nested = |flat: &[Mat]| -> Result<f64, NumError> {
        let p = d.params.unpack(flat);
        match run_task(&p.theta, &p.rates, &p.tables, &ex, d.cfg.ratio, d.cfg.tau) {
            Ok(Some(run)) => Ok(run.query_grad.loss),
            Ok(None) => Ok(0.0),
            Err(MetaError::Num(e)) => Err(e),
            Err(_) => Err(NumError::EmptyTape),
        }
    };
    let num = central_differences(nested, &point, EPS)?;
    let fine = central_differences(nested, &point, EPS_FINE)?;
    if max_tensor_error(&fine, &num) > KINK_TOL {
        return Ok(None);
    }
    Ok(Some(max_tensor_error(&analytic, &num)))
}

/// Runs `n_configs` accepted draws of every check and reports the worst
/// relative error of each.
pub fn check_grad(n_configs: usize, seed: u64) -> Result<GradCheckReport, MetaError> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradCheckReport::default();
    let full = LossWeights::default();
    let aug_only = LossWeights {
        meta: 0.0,
        instructor: 0.0,
        augmentation: 1.0,
    };
    while rep.configs < n_configs {
        if rep.redrawn + rep.skipped > MAX_REDRAWS {
            return Err(MetaError::Spec(
                "gradient check kept drawing unusable configurations".into(),
            ));
        }
        let d = draw(&mut rng);
        let lt = l_t_error(&d)?;
        let ls = l_s_error(&d)?;
        let la = trainer_error(&d, aug_only)?;
        let ltot = trainer_error(&d, full)?;
        let (Some(ls), Some(la), Some(ltot)) = (ls, la, ltot) else {
            rep.skipped += 1;
            continue;
        };
        let (Some(lt), Some(ls), Some(la), Some(ltot)) = (lt, ls, la, ltot) else {
            rep.redrawn += 1;
            continue;
        };
        let Some(ex) = exact_toy_error(&mut rng)? else {
            rep.redrawn += 1;
            continue;
        };
        rep.configs += 1;
        rep.task_loss = rep.task_loss.max(lt);
        rep.instructor = rep.instructor.max(ls);
        rep.augmentation = rep.augmentation.max(la);
        rep.total_first_order = rep.total_first_order.max(ltot);
        rep.exact_toy = rep.exact_toy.max(ex);
    }
    rep.seconds = started.elapsed().as_secs_f64();
    Ok(rep)
}
