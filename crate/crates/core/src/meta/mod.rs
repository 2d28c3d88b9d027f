//! Popularity-aware task segmentation and the bi-level update.
//!
//! Every batch is split into `N` fixed popularity tasks. Each task adapts
//! the shared initialization `Θ` with one (or more) SGD steps on its support
//! half using per-tensor learnable rates, giving `Ω^n`; the query half scores
//! `Ω^n`. Gradients with respect to `Ω^n` are pulled back to `Θ`, the rates
//! and (in exact mode) the embedding tables, then everything is updated with
//! Adam.

mod adam;

pub use adam::{AdamConfig, AdamSlot};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastream::split_support_query;
use crate::enhancer::{HeadGrads, InstructorHead};
use crate::numcore::NumError;
use crate::towers::{
    task_loss_grad, task_loss_hvp, EmbeddingTables, Example, FeatureSchema, LossGrad, NetParams,
    TableGrads,
};

pub const DEFAULT_TASKS: usize = 5;
pub const DEFAULT_COLD_WEIGHT: f64 = 2.0;
pub const DEFAULT_POPULAR_WEIGHT: f64 = 0.5;
pub const DEFAULT_OUTER_LR: f64 = 0.001;
pub const DEFAULT_INNER_LR: f64 = 0.001;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("no task in the batch has a query set")]
    AllTasksEmpty,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("exact meta-gradients support a single inner step, got {0}")]
    ExactNeedsOneStep(usize),
}

/// Fixed popularity segmentation `F` and per-task weights `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// `c_1 < … < c_{N−1}`; `c_1` is the cold threshold `v_cold`.
    pub thresholds: Vec<u64>,
    /// `λ_1..λ_N`.
    pub weights: Vec<f64>,
}

impl TaskSpec {
    /// Cold task plus popular tasks at `v_cold·4^k`.
    pub fn geometric(v_cold: u64, n_tasks: usize) -> Self {
        let thresholds = (0..n_tasks.saturating_sub(1))
            .map(|k| v_cold.saturating_mul(4u64.saturating_pow(k as u32)))
            .collect();
        let weights = (0..n_tasks)
            .map(|n| {
                if n == 0 {
                    DEFAULT_COLD_WEIGHT
                } else {
                    DEFAULT_POPULAR_WEIGHT
                }
            })
            .collect();
        Self {
            thresholds,
            weights,
        }
    }

    /// A single task covering everything, weight 1.
    pub fn single() -> Self {
        Self {
            thresholds: Vec::new(),
            weights: vec![1.0],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `v_cold`, or `u64::MAX` for a single-task spec.
    pub fn v_cold(&self) -> u64 {
        self.thresholds.first().copied().unwrap_or(u64::MAX)
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        if self.weights.len() != self.n_tasks() {
            return Err(MetaError::Spec(format!(
                "{} weights for {} tasks",
                self.weights.len(),
                self.n_tasks()
            )));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetaError::Spec(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if self.weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return Err(MetaError::Spec("task weights must be positive".into()));
        }
        Ok(())
    }

    /// `F(v) = 1 + |{j : v ≥ c_j}|`; task 1 is cold.
    pub fn assign_task(&self, views: u64) -> usize {
        1 + self.thresholds.iter().filter(|&&c| views >= c).count()
    }

    pub fn weight(&self, task: usize) -> f64 {
        self.weights[task - 1]
    }
}

/// `L^M = Σ λ_n L_{T_n}`, skipping tasks without a query loss.
pub fn meta_loss(losses: &[Option<f64>], spec: &TaskSpec) -> Result<f64, MetaError> {
    let mut total = 0.0;
    let mut any = false;
    for (n, l) in losses.iter().enumerate() {
        if let Some(l) = l {
            total += spec.weights[n] * l;
            any = true;
        }
    }
    if any {
        Ok(total)
    } else {
        Err(MetaError::AllTasksEmpty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MetaGradMode {
    #[default]
    FirstOrder,
    Exact,
}

impl std::str::FromStr for MetaGradMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first-order" | "first_order" | "fo" => Ok(Self::FirstOrder),
            "exact" => Ok(Self::Exact),
            other => Err(format!(
                "unknown meta-gradient mode `{other}` (first-order|exact)"
            )),
        }
    }
}

impl std::fmt::Display for MetaGradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FirstOrder => "first-order",
            Self::Exact => "exact",
        })
    }
}

/// Learnable inner rates: one value per network tensor per inner step.
#[derive(Debug, Clone, PartialEq)]
pub struct LslrRates {
    pub steps: Vec<Vec<f64>>,
}

impl LslrRates {
    pub fn constant(alpha: f64, n_tensors: usize, n_steps: usize) -> Self {
        Self {
            steps: vec![vec![alpha; n_tensors]; n_steps],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            steps: self.steps.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &LslrRates) {
        for (x, y) in self.steps.iter_mut().zip(&other.steps) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += a * q;
            }
        }
    }
}

/// Result of adapting `Θ` on a support set.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub omega: NetParams,
    /// Support-loss gradient at each inner step.
    pub step_grads: Vec<NetParams>,
    pub support_loss: f64,
}

/// `Ω = Θ − rates ⊙ ∇_Θ L_T(Θ, Φ | support)`, repeated per inner step.
/// Neither `Θ` nor `Φ` is modified.
pub fn local_update(
    theta: &NetParams,
    rates: &LslrRates,
    tables: &EmbeddingTables,
    support: &[Example],
    tau: f64,
) -> Result<LocalUpdate, MetaError> {
    let mut omega = theta.clone();
    let mut step_grads = Vec::with_capacity(rates.n_steps());
    let mut support_loss = 0.0;
    for (s, step_rates) in rates.steps.iter().enumerate() {
        let g = task_loss_grad(tables, &omega, support, tau)?;
        if s == 0 {
            support_loss = g.loss;
        }
        let mut scaled = g.net.clone();
        scaled.scale_tensors(step_rates);
        omega.axpy(-1.0, &scaled)?;
        step_grads.push(g.net);
    }
    Ok(LocalUpdate {
        omega,
        step_grads,
        support_loss,
    })
}

/// Gradient contributions obtained by pulling `∂L/∂Ω` back through a local
/// update.
#[derive(Debug, Clone)]
pub struct Pullback {
    pub theta: NetParams,
    pub rates: LslrRates,
    /// Only populated in exact mode (`Φ` enters `Ω` through the support loss).
    pub tables: TableGrads,
}

/// Chain rule through `Ω = Θ − r ⊙ g(Θ, Φ)`.
///
/// First-order mode treats `∂Ω/∂Θ` as identity. Exact mode uses
/// `∂L/∂Θ = dΩ − H_θθ (r ⊙ dΩ)` and `∂L/∂Φ = −H_φθ (r ⊙ dΩ)` with the
/// Hessian-vector products evaluated by forward-over-reverse differentiation.
/// The rate gradient `−g ⊙ dΩ` (summed per tensor) is exact for one step.
#[allow(clippy::too_many_arguments)]
pub fn pull_back(
    local: &LocalUpdate,
    d_omega: &NetParams,
    theta: &NetParams,
    rates: &LslrRates,
    tables: &EmbeddingTables,
    support: &[Example],
    tau: f64,
    mode: MetaGradMode,
) -> Result<Pullback, MetaError> {
    let mut rate_grads = rates.zeros_like();
    for (s, g) in local.step_grads.iter().enumerate() {
        let dots = g.tensor_dots(d_omega)?;
        for (r, d) in rate_grads.steps[s].iter_mut().zip(dots) {
            *r = -d;
        }
    }
    match mode {
        MetaGradMode::FirstOrder => Ok(Pullback {
            theta: d_omega.clone(),
            rates: rate_grads,
            tables: TableGrads::for_tables(tables),
        }),
        MetaGradMode::Exact => {
            if rates.n_steps() != 1 {
                return Err(MetaError::ExactNeedsOneStep(rates.n_steps()));
            }
            let mut v = d_omega.clone();
            v.scale_tensors(&rates.steps[0]);
            let (_, hv_net, hv_tables) = task_loss_hvp(tables, theta, &v, support, tau)?;
            let mut theta_grad = d_omega.clone();
            theta_grad.axpy(-1.0, &hv_net)?;
            let mut table_grad = TableGrads::for_tables(tables);
            table_grad.axpy(-1.0, &hv_tables);
            Ok(Pullback {
                theta: theta_grad,
                rates: rate_grads,
                tables: table_grad,
            })
        }
    }
}

/// A task that went through support adaptation and query scoring.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub local: LocalUpdate,
    /// Query loss and its gradients at `Ω` (network part is `∂L/∂Ω`).
    pub query_grad: LossGrad,
}

/// Splits `examples`, adapts on the support half and scores the query half.
/// `None` when either half would be empty.
pub fn run_task(
    theta: &NetParams,
    rates: &LslrRates,
    tables: &EmbeddingTables,
    examples: &[Example],
    ratio: f64,
    tau: f64,
) -> Result<Option<TaskRun>, MetaError> {
    let (support, query) = split_support_query(examples, ratio);
    if support.is_empty() || query.is_empty() {
        return Ok(None);
    }
    let local = local_update(theta, rates, tables, support, tau)?;
    let query_grad = task_loss_grad(tables, &local.omega, query, tau)?;
    Ok(Some(TaskRun {
        support: support.to_vec(),
        query: query.to_vec(),
        local,
        query_grad,
    }))
}

/// Accumulated gradient of the total loss for every parameter family.
#[derive(Debug, Clone)]
pub struct MetaGrads {
    pub tables: TableGrads,
    pub theta: NetParams,
    pub head: HeadGrads,
    pub rates: LslrRates,
}

impl MetaGrads {
    pub fn zeros(state: &MetaState) -> Self {
        Self {
            tables: TableGrads::for_tables(&state.tables),
            theta: state.theta.zeros_like(),
            head: HeadGrads::zeros_like(&state.head),
            rates: state.rates.zeros_like(),
        }
    }

    pub fn add_pullback(&mut self, p: &Pullback) -> Result<(), MetaError> {
        self.theta.axpy(1.0, &p.theta)?;
        self.rates.axpy(1.0, &p.rates);
        self.tables.axpy(1.0, &p.tables);
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), MetaError> {
        if !self.tables.all_finite() {
            return Err(MetaError::NonFiniteGradient("embedding tables"));
        }
        if !self.theta.all_finite() {
            return Err(MetaError::NonFiniteGradient("network initialization"));
        }
        if !self.head.all_finite() {
            return Err(MetaError::NonFiniteGradient("instructor head"));
        }
        if self.rates.steps.iter().flatten().any(|x| !x.is_finite()) {
            return Err(MetaError::NonFiniteGradient("inner rates"));
        }
        Ok(())
    }
}

/// `Φ`, `Θ`, LSLR rates, instructor head and their optimizer state.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub tables: EmbeddingTables,
    pub theta: NetParams,
    pub rates: LslrRates,
    pub head: InstructorHead,
    pub alpha: f64,
    pub beta: f64,
    pub learn_rates: bool,
    adam: AdamConfig,
    table_slots: Vec<AdamSlot>,
    theta_slots: Vec<AdamSlot>,
    head_slots: Vec<AdamSlot>,
    rate_slot: AdamSlot,
    step: u64,
}

/// Model shape shared by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl MetaState {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        schema: &FeatureSchema,
        arch: &Architecture,
        alpha: f64,
        beta: f64,
        inner_steps: usize,
        learn_rates: bool,
        rng: &mut R,
    ) -> Self {
        let tables = EmbeddingTables::init(schema, rng);
        let theta = NetParams::init(schema, &arch.hidden, arch.out_dim, rng);
        let head_in = arch
            .hidden
            .last()
            .copied()
            .unwrap_or_else(|| schema.item_dim());
        let head = InstructorHead::init(head_in, schema.id_dim(), rng);
        let rates = LslrRates::constant(alpha, theta.n_tensors(), inner_steps);
        Self::from_parts(tables, theta, rates, head, alpha, beta, learn_rates)
    }

    pub fn from_parts(
        tables: EmbeddingTables,
        theta: NetParams,
        rates: LslrRates,
        head: InstructorHead,
        alpha: f64,
        beta: f64,
        learn_rates: bool,
    ) -> Self {
        Self {
            table_slots: tables.tables().map(|t| AdamSlot::new(t.len())).collect(),
            theta_slots: theta
                .tensors()
                .iter()
                .map(|t| AdamSlot::new(t.len()))
                .collect(),
            head_slots: vec![AdamSlot::new(head.w.len()), AdamSlot::new(head.b.len())],
            rate_slot: AdamSlot::new(rates.steps.iter().map(Vec::len).sum()),
            adam: AdamConfig::with_lr(beta),
            tables,
            theta,
            rates,
            head,
            alpha,
            beta,
            learn_rates,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam step on `{Φ, Θ, f^Sup, rates}` along `grads`.
    /// Rates are kept non-negative.
    pub fn global_update(&mut self, grads: &MetaGrads) -> Result<(), MetaError> {
        grads.check_finite()?;
        self.step += 1;
        let t = self.step;
        let cfg = self.adam;

        let table_grads = grads.tables.user.iter().chain(&grads.tables.item);
        for ((table, slot), sparse) in self
            .tables
            .tables_mut()
            .zip(self.table_slots.iter_mut())
            .zip(table_grads)
        {
            let cols = table.cols();
            let mut dense = vec![0.0; table.len()];
            for (&row, g) in sparse {
                if row < table.rows() {
                    dense[row * cols..(row + 1) * cols].copy_from_slice(g);
                }
            }
            slot.step(table.as_mut_slice(), &dense, &cfg, t);
        }
        for ((p, slot), g) in self
            .theta
            .tensors_mut()
            .into_iter()
            .zip(self.theta_slots.iter_mut())
            .zip(grads.theta.tensors())
        {
            slot.step(p.as_mut_slice(), g.as_slice(), &cfg, t);
        }
        self.head_slots[0].step(self.head.w.as_mut_slice(), grads.head.w.as_slice(), &cfg, t);
        self.head_slots[1].step(self.head.b.as_mut_slice(), grads.head.b.as_slice(), &cfg, t);
        if self.learn_rates {
            let mut flat: Vec<f64> = self.rates.steps.iter().flatten().copied().collect();
            let g: Vec<f64> = grads.rates.steps.iter().flatten().copied().collect();
            self.rate_slot.step(&mut flat, &g, &cfg, t);
            let mut it = flat.into_iter();
            for r in self.rates.steps.iter_mut().flatten() {
                *r = it.next().expect("same length").max(0.0);
            }
        }
        Ok(())
    }
}
