//! Flat `key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datastream::ViewMode;
use crate::enhancer::{LossWeights, DEFAULT_SNAPSHOT_CAPACITY};
use crate::meta::{Architecture, MetaGradMode, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "PF")]
    Pf,
    #[serde(rename = "PAM-M")]
    PamM,
    #[serde(rename = "PAM-S")]
    PamS,
    #[serde(rename = "PAM-A")]
    PamA,
    #[serde(rename = "PAM-F")]
    PamF,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Pf,
        Variant::PamM,
        Variant::PamS,
        Variant::PamA,
        Variant::PamF,
    ];

    pub fn is_meta(self) -> bool {
        self != Variant::Pf
    }

    /// Loss weights after switching off the enhancer parts this variant lacks.
    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        let (s, a) = match self {
            Variant::Pf | Variant::PamM => (0.0, 0.0),
            Variant::PamS => (w.instructor, 0.0),
            Variant::PamA => (0.0, w.augmentation),
            Variant::PamF => (w.instructor, w.augmentation),
        };
        LossWeights {
            meta: w.meta,
            instructor: s,
            augmentation: a,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pf => "PF",
            Variant::PamM => "PAM-M",
            Variant::PamS => "PAM-S",
            Variant::PamA => "PAM-A",
            Variant::PamF => "PAM-F",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_items: usize,
    pub n_users: usize,
    pub n_interactions: usize,
    pub zipf_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Interaction TSV; the synthetic generator is used when absent.
    pub data: Option<PathBuf>,
    /// Item side table (`item_id\tvalue...`).
    pub item_features: Option<PathBuf>,
    pub synth: SynthParams,
    pub periods: usize,
    pub test_start: usize,
    pub view_mode: ViewMode,
    pub tasks: TaskSpec,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub gamma: LossWeights,
    pub ratio: f64,
    pub seed: u64,
    pub variant: Variant,
    pub meta_grad: MetaGradMode,
    pub inner_steps: usize,
    pub learn_rates: bool,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub emb_dim: usize,
    pub arch: Architecture,
    pub pop_buckets: usize,
    pub snapshot_capacity: usize,
    /// PF trains on the query half of each batch only.
    pub pf_query_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: None,
            item_features: None,
            synth: SynthParams {
                n_items: 5000,
                n_users: 2000,
                n_interactions: 200_000,
                zipf_exponent: 1.1,
            },
            periods: 31,
            test_start: 24,
            view_mode: ViewMode::Positive,
            tasks: TaskSpec::geometric(50, 5),
            alpha: crate::meta::DEFAULT_INNER_LR,
            beta: crate::meta::DEFAULT_OUTER_LR,
            tau: crate::towers::DEFAULT_TAU,
            gamma: LossWeights::default(),
            ratio: 0.5,
            seed: 0,
            variant: Variant::PamF,
            meta_grad: MetaGradMode::FirstOrder,
            inner_steps: 1,
            learn_rates: true,
            train_batch: 1024,
            eval_batch: crate::serve_eval::DEFAULT_EVAL_BATCH,
            emb_dim: crate::towers::DEFAULT_EMB_DIM,
            arch: Architecture {
                hidden: vec![crate::towers::DEFAULT_HIDDEN_DIM],
                out_dim: crate::towers::DEFAULT_OUT_DIM,
            },
            pop_buckets: 12,
            snapshot_capacity: DEFAULT_SNAPSHOT_CAPACITY,
            pf_query_only: false,
        }
    }
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| format!("bad list element {p:?}"))
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.trim()
        .parse()
        .map_err(|_| format!("{key}: cannot parse {v:?}"))
}

impl ExperimentConfig {
    /// Documented keys, in file order.
    pub const KEYS: [&'static str; 33] = [
        "data",
        "item_features",
        "synth_items",
        "synth_users",
        "synth_interactions",
        "synth_zipf",
        "periods",
        "test_start",
        "view_mode",
        "v_cold",
        "n_tasks",
        "task_thresholds",
        "task_weights",
        "alpha",
        "beta",
        "tau",
        "gamma_m",
        "gamma_s",
        "gamma_a",
        "ratio",
        "seed",
        "variant",
        "meta_grad",
        "inner_steps",
        "learn_rates",
        "train_batch",
        "eval_batch",
        "emb_dim",
        "hidden",
        "out_dim",
        "pop_buckets",
        "snapshot_capacity",
        "pf_query_only",
    ];

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.trim() {
            "data" => self.data = path(v),
            "item_features" => self.item_features = path(v),
            "synth_items" => self.synth.n_items = parse(key, v)?,
            "synth_users" => self.synth.n_users = parse(key, v)?,
            "synth_interactions" => self.synth.n_interactions = parse(key, v)?,
            "synth_zipf" => self.synth.zipf_exponent = parse(key, v)?,
            "periods" => self.periods = parse(key, v)?,
            "test_start" => self.test_start = parse(key, v)?,
            "view_mode" => self.view_mode = parse(key, v)?,
            "v_cold" => {
                let n = self.tasks.n_tasks();
                let weights = self.tasks.weights.clone();
                self.tasks = TaskSpec::geometric(parse(key, v)?, n);
                self.tasks.weights = weights;
            }
            "n_tasks" => {
                let n: usize = parse(key, v)?;
                self.tasks = if n == 1 {
                    TaskSpec::single()
                } else {
                    let v_cold = self.tasks.thresholds.first().copied().unwrap_or(50);
                    TaskSpec::geometric(v_cold, n)
                };
            }
            "task_thresholds" => self.tasks.thresholds = list(v)?,
            "task_weights" => self.tasks.weights = list(v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "gamma_m" => self.gamma.meta = parse(key, v)?,
            "gamma_s" => self.gamma.instructor = parse(key, v)?,
            "gamma_a" => self.gamma.augmentation = parse(key, v)?,
            "ratio" => self.ratio = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = parse(key, v)?,
            "meta_grad" => self.meta_grad = parse(key, v)?,
            "inner_steps" => self.inner_steps = parse(key, v)?,
            "learn_rates" => self.learn_rates = parse(key, v)?,
            "train_batch" => self.train_batch = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "hidden" => self.arch.hidden = list(v)?,
            "out_dim" => self.arch.out_dim = parse(key, v)?,
            "pop_buckets" => self.pop_buckets = parse(key, v)?,
            "snapshot_capacity" => self.snapshot_capacity = parse(key, v)?,
            "pf_query_only" => self.pf_query_only = parse(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Reads a flat config file: one `key=value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            self.set(k, v).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    /// Applies `--key=value` (or `key=value`) overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), String> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| format!("override {o:?}: expected key=value"))?;
            self.set(&k.replace('-', "_"), v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<&'static str, String> {
        let p = |x: &Option<PathBuf>| {
            x.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut m = BTreeMap::new();
        m.insert("data", p(&self.data));
        m.insert("item_features", p(&self.item_features));
        m.insert("synth_items", self.synth.n_items.to_string());
        m.insert("synth_users", self.synth.n_users.to_string());
        m.insert("synth_interactions", self.synth.n_interactions.to_string());
        m.insert("synth_zipf", self.synth.zipf_exponent.to_string());
        m.insert("periods", self.periods.to_string());
        m.insert("test_start", self.test_start.to_string());
        m.insert("view_mode", self.view_mode.to_string());
        m.insert("v_cold", self.tasks.v_cold().to_string());
        m.insert("n_tasks", self.tasks.n_tasks().to_string());
        m.insert("task_thresholds", join(&self.tasks.thresholds));
        m.insert("task_weights", join(&self.tasks.weights));
        m.insert("alpha", self.alpha.to_string());
        m.insert("beta", self.beta.to_string());
        m.insert("tau", self.tau.to_string());
        m.insert("gamma_m", self.gamma.meta.to_string());
        m.insert("gamma_s", self.gamma.instructor.to_string());
        m.insert("gamma_a", self.gamma.augmentation.to_string());
        m.insert("ratio", self.ratio.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("variant", self.variant.to_string());
        m.insert("meta_grad", self.meta_grad.to_string());
        m.insert("inner_steps", self.inner_steps.to_string());
        m.insert("learn_rates", self.learn_rates.to_string());
        m.insert("train_batch", self.train_batch.to_string());
        m.insert("eval_batch", self.eval_batch.to_string());
        m.insert("emb_dim", self.emb_dim.to_string());
        m.insert("hidden", join(&self.arch.hidden));
        m.insert("out_dim", self.arch.out_dim.to_string());
        m.insert("pop_buckets", self.pop_buckets.to_string());
        m.insert("snapshot_capacity", self.snapshot_capacity.to_string());
        m.insert("pf_query_only", self.pf_query_only.to_string());
        m
    }

    /// Flat-file rendering that [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        let kv = self.to_kv();
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(&format!("{k}={}\n", kv[k]));
        }
        out
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tasks.validate().map_err(|e| e.to_string())?;
        let pos = |name: &str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(format!(
                    "{name} must be a finite non-negative number, got {x}"
                ))
            }
        };
        pos("alpha", self.alpha)?;
        pos("beta", self.beta)?;
        pos("gamma_m", self.gamma.meta)?;
        pos("gamma_s", self.gamma.instructor)?;
        pos("gamma_a", self.gamma.augmentation)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(format!("ratio must lie in (0, 1), got {}", self.ratio));
        }
        if self.periods == 0 {
            return Err("periods must be positive".into());
        }
        if self.test_start == 0 || self.test_start > self.periods {
            return Err(format!("test_start must lie in 1..={}", self.periods));
        }
        if self.inner_steps == 0 {
            return Err("inner_steps must be positive".into());
        }
        if self.meta_grad == MetaGradMode::Exact && self.inner_steps != 1 {
            return Err("exact meta-gradients need inner_steps = 1".into());
        }
        if self.train_batch == 0 || self.eval_batch == 0 {
            return Err("batch sizes must be positive".into());
        }
        if self.emb_dim == 0 || self.arch.out_dim == 0 || self.arch.hidden.contains(&0) {
            return Err("layer widths must be positive".into());
        }
        if self.pop_buckets == 0 || self.snapshot_capacity == 0 {
            return Err("pop_buckets and snapshot_capacity must be positive".into());
        }
        if self.data.is_none()
            && (self.synth.n_items == 0
                || self.synth.n_users == 0
                || self.synth.zipf_exponent <= 0.0)
        {
            return Err("synthetic stream parameters must be positive".into());
        }
        Ok(())
    }
}
