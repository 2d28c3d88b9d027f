//! Experiment driver: stream loading, the per-period train/serve/evaluate
//! loop, ablations, the masking probe, checkpoints and reports.

pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod probe;
pub mod report;
pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, SynthParams, Variant};
pub use probe::{mask_probe, ProbeResult};
pub use synth::{generate_synth_stream, SynthStream};

use crate::datastream::{
    load_interactions, load_item_features, partition_periods, split_support_query, DataError,
    Interaction, PeriodBatch,
};
use crate::enhancer::{
    augmentation_loss, instructor_loss_grad, simulate_hot, total_loss, LossWeights, SnapshotStore,
};
use crate::meta::{meta_loss, pull_back, run_task, MetaError, MetaGrads, MetaState, TaskRun};
use crate::numcore::NumError;
use crate::serve_eval::{
    evaluate_period, mean_report, EvalRecord, FinalReport, ParamRegistry, PeriodReport, PfTrainer,
};
use crate::towers::{Example, FeatureEncoder, FeatureSchema, NetParams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("training failed in period {period}, batch {batch}: {source}")]
    Training {
        period: usize,
        batch: usize,
        source: MetaError,
    },
    #[error("evaluation failed in period {period}: {source}")]
    Eval { period: usize, source: NumError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Git-style content hash: SHA-256 of `"blob {len}\0" ++ bytes`, hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The interaction stream an experiment runs on.
#[derive(Debug, Clone)]
pub struct StreamData {
    pub interactions: Vec<Interaction>,
    pub item_features: Option<HashMap<u64, Vec<u64>>>,
    pub hash: String,
}

impl StreamData {
    /// Reads `config.data` (and `config.item_features`), or generates the
    /// synthetic stream from the config's seed.
    pub fn load(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let io = |path: &std::path::Path| {
            let p = path.display().to_string();
            move |source| HarnessError::Io { path: p, source }
        };
        match &config.data {
            Some(path) => {
                let bytes = fs::read(path).map_err(io(path))?;
                let interactions = load_interactions(BufReader::new(bytes.as_slice()))?;
                let item_features = match &config.item_features {
                    Some(fp) => {
                        let f = fs::File::open(fp).map_err(io(fp))?;
                        Some(load_item_features(BufReader::new(f))?)
                    }
                    None => None,
                };
                Ok(Self {
                    interactions,
                    item_features,
                    hash: content_hash(&bytes),
                })
            }
            None => Ok(Self::from_synth(generate_synth_stream(
                config.synth.n_items,
                config.synth.n_users,
                config.synth.n_interactions,
                config.synth.zipf_exponent,
                config.seed,
            ))),
        }
    }

    pub fn from_synth(s: SynthStream) -> Self {
        let hash = content_hash(s.to_tsv().as_bytes());
        Self {
            interactions: s.interactions,
            item_features: Some(s.item_features),
            hash,
        }
    }
}

/// How often each stage of the training loop ran.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub batches: u64,
    pub tasks_built: u64,
    pub local_updates: u64,
    pub snapshot_writes: u64,
    pub simulated: u64,
    pub instructor_losses: u64,
    pub augmentation_losses: u64,
    pub global_updates: u64,
    pub registry_writes: u64,
}

/// Training objective averaged over the batches of one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTrace {
    pub period: usize,
    pub batches: usize,
    /// Mean `L^M` (meta variants) or mean batch loss (PF).
    pub mean_loss: f64,
    /// Mean total loss `L^T`.
    pub mean_total: f64,
    /// Per-batch `L^M` / PF loss, in order.
    pub batch_losses: Vec<f64>,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub stream_hash: String,
    pub reports: Vec<PeriodReport>,
    pub final_report: FinalReport,
    pub trace: Vec<PeriodTrace>,
    pub counters: Counters,
    pub state: MetaState,
    pub store: SnapshotStore,
    pub registry: ParamRegistry,
    pub encoder: FeatureEncoder,
    pub periods: Vec<PeriodBatch>,
}

/// Loss terms of one global step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub task_losses: Vec<Option<f64>>,
    pub meta: f64,
    pub instructor: Option<f64>,
    pub augmentation: Option<f64>,
    pub total: f64,
}

/// Meta-learner state plus the enhancer's snapshot store.
#[derive(Debug, Clone)]
pub struct PamTrainer {
    pub state: MetaState,
    pub store: SnapshotStore,
    pub weights: LossWeights,
    pub counters: Counters,
    pub schema: FeatureSchema,
    /// Period stamped on snapshot writes.
    pub period: usize,
    /// Latest `Ω^n` produced in the current period, by task index − 1.
    pub period_omegas: Vec<Option<NetParams>>,
}

impl PamTrainer {
    pub fn new(
        state: MetaState,
        schema: FeatureSchema,
        weights: LossWeights,
        n_tasks: usize,
        snapshot_capacity: usize,
    ) -> Self {
        Self {
            state,
            schema,
            period: 1,
            store: SnapshotStore::new(snapshot_capacity),
            weights,
            counters: Counters::default(),
            period_omegas: vec![None; n_tasks],
        }
    }

    fn enhancer_on(&self) -> bool {
        self.weights.instructor > 0.0 || self.weights.augmentation > 0.0
    }

    fn add_task(
        &self,
        grads: &mut MetaGrads,
        run: &TaskRun,
        weight: f64,
        cfg: &ExperimentConfig,
    ) -> Result<(), MetaError> {
        let mut d = run.query_grad.net.clone();
        d.scale_tensors(&vec![weight; d.n_tensors()]);
        let s = &self.state;
        let pb = pull_back(
            &run.local,
            &d,
            &s.theta,
            &s.rates,
            &s.tables,
            &run.support,
            cfg.tau,
            cfg.meta_grad,
        )?;
        grads.add_pullback(&pb)?;
        grads.tables.axpy(weight, &run.query_grad.tables);
        Ok(())
    }

    /// One global step on a batch of encoded interactions. `None` when no
    /// task in the batch has both a support and a query half.
    pub fn step(
        &mut self,
        batch: &[EvalRecord],
        cfg: &ExperimentConfig,
    ) -> Result<Option<StepOutcome>, MetaError> {
        let Some((grads, outcome)) = self.compute_grads(batch, cfg)? else {
            return Ok(None);
        };
        self.state.global_update(&grads)?;
        self.counters.global_updates += 1;
        Ok(Some(outcome))
    }

    /// Gradient of `L^T` for one batch without applying it. Snapshots of the
    /// batch's cold items are still written.
    pub fn compute_grads(
        &mut self,
        batch: &[EvalRecord],
        cfg: &ExperimentConfig,
    ) -> Result<Option<(MetaGrads, StepOutcome)>, MetaError> {
        let spec = &cfg.tasks;
        let n_tasks = spec.n_tasks();
        let mut by_task: Vec<Vec<Example>> = vec![Vec::new(); n_tasks];
        for r in batch {
            by_task[r.task - 1].push(r.example.clone());
        }
        self.counters.batches += 1;
        let mut grads = MetaGrads::zeros(&self.state);
        let mut task_losses = vec![None; n_tasks];
        let mut cold_run = None;
        for (n, data) in by_task.iter().enumerate() {
            if data.is_empty() {
                continue;
            }
            self.counters.tasks_built += 1;
            let s = &self.state;
            let Some(run) = run_task(&s.theta, &s.rates, &s.tables, data, cfg.ratio, cfg.tau)?
            else {
                continue;
            };
            self.counters.local_updates += 1;
            task_losses[n] = Some(run.query_grad.loss);
            self.add_task(
                &mut grads,
                &run,
                spec.weight(n + 1) * self.weights.meta,
                cfg,
            )?;
            self.period_omegas[n] = Some(run.local.omega.clone());
            if n == 0 {
                cold_run = Some(run);
            }
        }
        if task_losses.iter().all(Option::is_none) {
            return Ok(None);
        }
        let meta = meta_loss(&task_losses, spec)?;

        let mut instructor = None;
        let mut augmentation = None;
        if self.enhancer_on() {
            let schema = &self.schema;
            let cold: Vec<(u64, &Example)> = batch
                .iter()
                .filter(|r| r.task == 1)
                .map(|r| (r.item_id, &r.example))
                .collect();
            self.store
                .snapshot_cold(&cold, &self.state.tables, schema, self.period);
            self.counters.snapshot_writes += cold.len() as u64;
            let hot: Vec<(u64, &Example)> = batch
                .iter()
                .filter(|r| r.task > 1)
                .map(|r| (r.item_id, &r.example))
                .collect();
            let sims = simulate_hot(&hot, &self.store, schema);
            self.counters.simulated += sims.len() as u64;

            if self.weights.instructor > 0.0 {
                if let Some(run) = &cold_run {
                    let s = &self.state;
                    if let Some(out) =
                        instructor_loss_grad(&sims, &s.tables, schema, &run.local.omega, &s.head)?
                    {
                        self.counters.instructor_losses += 1;
                        let w = self.weights.instructor;
                        let mut d = out.d_omega.clone();
                        d.scale_tensors(&vec![w; d.n_tensors()]);
                        let pb = pull_back(
                            &run.local,
                            &d,
                            &s.theta,
                            &s.rates,
                            &s.tables,
                            &run.support,
                            cfg.tau,
                            cfg.meta_grad,
                        )?;
                        grads.add_pullback(&pb)?;
                        grads.head.axpy(w, &out.head)?;
                        grads.tables.axpy(w, &out.tables);
                        instructor = Some(out.loss);
                    }
                }
            }
            if self.weights.augmentation > 0.0 {
                let examples: Vec<_> = sims.iter().map(|s| s.example.clone()).collect();
                let s = &self.state;
                if let Some(run) =
                    augmentation_loss(&examples, &s.theta, &s.rates, &s.tables, cfg.ratio, cfg.tau)?
                {
                    self.counters.augmentation_losses += 1;
                    augmentation = Some(run.query_grad.loss);
                    self.add_task(&mut grads, &run, self.weights.augmentation, cfg)?;
                }
            }
        }
        let total = total_loss(
            meta,
            instructor.unwrap_or(0.0),
            augmentation.unwrap_or(0.0),
            &self.weights,
        );
        let outcome = StepOutcome {
            task_losses,
            meta,
            instructor,
            augmentation,
            total,
        };
        Ok(Some((grads, outcome)))
    }
}

fn encode_period(p: &PeriodBatch, enc: &FeatureEncoder, cfg: &ExperimentConfig) -> Vec<EvalRecord> {
    p.interactions
        .iter()
        .zip(&p.views)
        .map(|(x, &v)| EvalRecord {
            item_id: x.item_id,
            example: enc.encode(x, v),
            views: v,
            task: cfg.tasks.assign_task(v),
        })
        .collect()
}

/// Encoded records of each period, keyed by period number.
pub type EncodedPeriods = Vec<(usize, Vec<EvalRecord>)>;

/// Partitions and encodes `stream` exactly as a run on `config` would.
pub fn encode_stream(
    config: &ExperimentConfig,
    stream: &StreamData,
) -> Result<(FeatureEncoder, EncodedPeriods), HarnessError> {
    let periods = partition_periods(&stream.interactions, config.periods, config.view_mode)?;
    let enc = FeatureEncoder::build(
        &stream.interactions,
        stream.item_features.as_ref(),
        config.emb_dim,
        config.pop_buckets,
    );
    let encoded = periods
        .iter()
        .map(|p| (p.period, encode_period(p, &enc, config)))
        .collect();
    Ok((enc, encoded))
}

/// Re-scores every test period of `stream` with a saved model: final
/// embedding tables plus the registry's most recent task parameters.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    stream: &StreamData,
    ckpt: &Checkpoint,
) -> Result<Vec<PeriodReport>, HarnessError> {
    let (enc, encoded) = encode_stream(config, stream)?;
    let fits = |specs: &[crate::towers::FeatureSpec], mats: &[crate::numcore::Mat]| {
        specs.len() == mats.len()
            && specs
                .iter()
                .zip(mats)
                .all(|(f, m)| m.rows() == f.vocab && m.cols() == f.dim)
    };
    if !fits(&enc.schema.user, &ckpt.tables.user) || !fits(&enc.schema.item, &ckpt.tables.item) {
        return Err(HarnessError::Checkpoint(
            "checkpoint does not match this stream's feature schema".into(),
        ));
    }
    encoded
        .iter()
        .filter(|(t, _)| *t >= config.test_start)
        .map(|(t, records)| {
            evaluate_period(*t, records, &ckpt.tables, &ckpt.registry, config.eval_batch)
                .map_err(|source| HarnessError::Eval { period: *t, source })
        })
        .collect()
}

impl RunOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tables: self.state.tables.clone(),
            theta: self.state.theta.clone(),
            rates: self.state.rates.clone(),
            head: self.state.head.clone(),
            store: self.store.clone(),
            registry: self.registry.clone(),
        }
    }

    /// Masking probe over the last `n_batches` evaluation-sized batches of the
    /// stream, using the final tables and registry.
    pub fn probe(&self, n_batches: usize) -> Result<ProbeResult, NumError> {
        let need = n_batches * self.config.eval_batch;
        let mut tail: Vec<EvalRecord> = Vec::new();
        for p in self.periods.iter().rev() {
            let mut recs = encode_period(p, &self.encoder, &self.config);
            recs.append(&mut tail);
            tail = recs;
            if tail.len() >= need {
                break;
            }
        }
        mask_probe(
            &tail,
            &self.state.tables,
            &self.registry,
            &self.encoder.schema,
            n_batches,
            self.config.eval_batch,
        )
    }
}

enum Trainer {
    Pf(Box<PfTrainer>),
    Pam(Box<PamTrainer>),
}

/// Runs the full train/serve/evaluate protocol on `config`'s stream.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    let stream = StreamData::load(config)?;
    run_on_stream(config, &stream)
}

/// [`run_experiment`] on an already loaded stream.
pub fn run_on_stream(
    config: &ExperimentConfig,
    stream: &StreamData,
) -> Result<RunOutput, HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    let periods = partition_periods(&stream.interactions, config.periods, config.view_mode)?;
    let enc = FeatureEncoder::build(
        &stream.interactions,
        stream.item_features.as_ref(),
        config.emb_dim,
        config.pop_buckets,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let state = MetaState::init(
        &enc.schema,
        &config.arch,
        config.alpha,
        config.beta,
        config.inner_steps,
        config.learn_rates,
        &mut rng,
    );
    let n_tasks = config.tasks.n_tasks();
    let mut trainer = if config.variant.is_meta() {
        let weights = config.variant.effective_weights(&config.gamma);
        Trainer::Pam(Box::new(PamTrainer::new(
            state,
            enc.schema.clone(),
            weights,
            n_tasks,
            config.snapshot_capacity,
        )))
    } else {
        Trainer::Pf(Box::new(PfTrainer::from_state(state, config.tau)))
    };
    let mut registry = ParamRegistry::new();
    let mut reports = Vec::new();
    let mut trace = Vec::new();
    let mut registry_writes = 0u64;

    for p in &periods {
        let t = p.period;
        let records = encode_period(p, &enc, config);
        if t >= config.test_start {
            let tables = match &trainer {
                Trainer::Pf(pf) => pf.tables(),
                Trainer::Pam(pam) => &pam.state.tables,
            };
            let report = evaluate_period(t, &records, tables, &registry, config.eval_batch)
                .map_err(|source| HarnessError::Eval { period: t, source })?;
            log::info!(
                "{} period {t}: cold R@10 {:.4} ({} q), popular R@10 {:.4} ({} q)",
                config.variant,
                report.cold.recall[1],
                report.cold.n_queries,
                report.popular.recall[1],
                report.popular.n_queries
            );
            reports.push(report);
        }

        let mut batch_losses = Vec::new();
        let mut totals = Vec::new();
        for (b, batch) in records.chunks(config.train_batch).enumerate() {
            let wrap = |source| HarnessError::Training {
                period: t,
                batch: b,
                source,
            };
            match &mut trainer {
                Trainer::Pf(pf) => {
                    let examples: Vec<_> = batch.iter().map(|r| r.example.clone()).collect();
                    let data = if config.pf_query_only {
                        split_support_query(&examples, config.ratio).1
                    } else {
                        &examples[..]
                    };
                    if data.is_empty() {
                        continue;
                    }
                    let loss = pf.train_step(data).map_err(wrap)?;
                    batch_losses.push(loss);
                    totals.push(loss);
                }
                Trainer::Pam(pam) => {
                    pam.period = t;
                    if let Some(out) = pam.step(batch, config).map_err(wrap)? {
                        batch_losses.push(out.meta);
                        totals.push(out.total);
                    }
                }
            }
        }
        match &mut trainer {
            Trainer::Pf(pf) => {
                for n in 1..=n_tasks {
                    registry.store_params(t, n, pf.net());
                    registry_writes += 1;
                }
            }
            Trainer::Pam(pam) => {
                for (n, omega) in pam.period_omegas.iter_mut().enumerate() {
                    if let Some(o) = omega.take() {
                        registry.store_params(t, n + 1, &o);
                        registry_writes += 1;
                    }
                }
            }
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        trace.push(PeriodTrace {
            period: t,
            batches: batch_losses.len(),
            mean_loss: mean(&batch_losses),
            mean_total: mean(&totals),
            batch_losses,
        });
    }

    let (state, store, mut counters) = match trainer {
        Trainer::Pf(pf) => (
            pf.into_state(),
            SnapshotStore::new(config.snapshot_capacity),
            Counters::default(),
        ),
        Trainer::Pam(pam) => {
            let pam = *pam;
            (pam.state, pam.store, pam.counters)
        }
    };
    counters.registry_writes = registry_writes;
    let final_report = mean_report(&reports);
    Ok(RunOutput {
        config: config.clone(),
        stream_hash: stream.hash.clone(),
        reports,
        final_report,
        trace,
        counters,
        state,
        store,
        registry,
        encoder: enc,
        periods,
    })
}

/// Final reports of every variant on one shared stream and seed.
pub fn run_ablation_suite(
    config: &ExperimentConfig,
) -> Result<Vec<(Variant, RunOutput)>, HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    let stream = StreamData::load(config)?;
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            c.variant = v;
            run_on_stream(&c, &stream).map(|out| (v, out))
        })
        .collect()
}
