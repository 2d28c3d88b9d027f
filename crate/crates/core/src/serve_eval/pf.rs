//! Periodical fine-tuning: one parameter set trained on every batch with the
//! same optimizer as the meta-learner, served for every task.

use rand::Rng;

use crate::enhancer::InstructorHead;
use crate::meta::{Architecture, LslrRates, MetaError, MetaGrads, MetaState};
use crate::towers::{task_loss_grad, EmbeddingTables, Example, FeatureSchema, NetParams};

#[derive(Debug, Clone)]
pub struct PfTrainer {
    state: MetaState,
    tau: f64,
}

impl PfTrainer {
    pub fn init<R: Rng>(
        schema: &FeatureSchema,
        arch: &Architecture,
        lr: f64,
        tau: f64,
        rng: &mut R,
    ) -> Self {
        let state = MetaState::init(schema, arch, 0.0, lr, 1, false, rng);
        Self { state, tau }
    }

    pub fn from_parts(tables: EmbeddingTables, net: NetParams, lr: f64, tau: f64) -> Self {
        let head = InstructorHead {
            w: crate::numcore::Mat::zeros(1, 1),
            b: crate::numcore::Mat::zeros(1, 1),
        };
        let rates = LslrRates::constant(0.0, net.n_tensors(), 1);
        Self {
            state: MetaState::from_parts(tables, net, rates, head, 0.0, lr, false),
            tau,
        }
    }

    /// Wraps an existing state; its rates and head are left untouched.
    pub fn from_state(mut state: MetaState, tau: f64) -> Self {
        state.learn_rates = false;
        Self { state, tau }
    }

    /// One Adam step on `L_T` over `batch`; returns the loss before the step.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<f64, MetaError> {
        let g = task_loss_grad(&self.state.tables, &self.state.theta, batch, self.tau)?;
        let mut grads = MetaGrads::zeros(&self.state);
        grads.theta = g.net;
        grads.tables = g.tables;
        self.state.global_update(&grads)?;
        Ok(g.loss)
    }

    pub fn net(&self) -> &NetParams {
        &self.state.theta
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.state.tables
    }

    pub fn state(&self) -> &MetaState {
        &self.state
    }

    pub fn into_state(self) -> MetaState {
        self.state
    }
}
