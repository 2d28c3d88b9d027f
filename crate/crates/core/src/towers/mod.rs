//! Two-tower base recommender: embedding tables, per-tower MLPs, in-batch
//! softmax prediction and log loss.

mod encode;
mod model;

pub use encode::{pop_bucket, FeatureEncoder, IdVocab};
pub use model::{
    batch_loss_on_tape, distinct_users, embed_items_on_tape, net_on_tape, task_loss,
    task_loss_grad, task_loss_hvp, tower_forward_tape, tower_hidden_tape, BatchTape, LossGrad,
    SparseRows, TableGrads, TapeLayer, TapeNet,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numcore::{Mat, NumError};

pub const DEFAULT_EMB_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_OUT_DIM: usize = 32;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_TAU: f64 = 0.2;
pub const EMBED_INIT_RANGE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    BehaviorId,
    BehaviorSeq,
    Content,
}

impl FeatureKind {
    pub fn is_behavior(self) -> bool {
        matches!(self, Self::BehaviorId | Self::BehaviorSeq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    /// Table rows, including the reserved row 0.
    pub vocab: usize,
    pub dim: usize,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn new(name: &str, vocab: usize, dim: usize, kind: FeatureKind) -> Self {
        Self {
            name: name.to_string(),
            vocab,
            dim,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user: Vec<FeatureSpec>,
    pub item: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<(), String> {
        if self.user.is_empty() || self.item.is_empty() {
            return Err("schema needs at least one user and one item feature".into());
        }
        let ids = self
            .item
            .iter()
            .filter(|f| f.kind == FeatureKind::BehaviorId)
            .count();
        if ids != 1 {
            return Err(format!(
                "exactly one item behavior-ID feature required, found {ids}"
            ));
        }
        for f in self.user.iter().chain(&self.item) {
            if f.vocab < 2 || f.dim == 0 {
                return Err(format!("feature `{}` needs vocab ≥ 2 and dim ≥ 1", f.name));
            }
        }
        Ok(())
    }

    pub fn user_dim(&self) -> usize {
        self.user.iter().map(|f| f.dim).sum()
    }

    pub fn item_dim(&self) -> usize {
        self.item.iter().map(|f| f.dim).sum()
    }

    /// Index of the item behavior-ID feature.
    pub fn id_slot(&self) -> usize {
        self.item
            .iter()
            .position(|f| f.kind == FeatureKind::BehaviorId)
            .expect("validated schema has an ID slot")
    }

    pub fn id_dim(&self) -> usize {
        self.item[self.id_slot()].dim
    }

    /// Column range of item feature `q` inside the concatenated item embedding.
    pub fn item_slot_range(&self, q: usize) -> std::ops::Range<usize> {
        let start: usize = self.item[..q].iter().map(|f| f.dim).sum();
        start..start + self.item[q].dim
    }
}

/// Embedding tables `Φ`: one matrix per feature, row 0 reserved for unseen ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub user: Vec<Mat>,
    pub item: Vec<Mat>,
}

impl EmbeddingTables {
    pub fn init<R: Rng>(schema: &FeatureSchema, rng: &mut R) -> Self {
        let dist = Uniform::new(-EMBED_INIT_RANGE, EMBED_INIT_RANGE).expect("valid range");
        let mut make = |f: &FeatureSpec| {
            let mut m = Mat::zeros(f.vocab, f.dim);
            for r in 1..f.vocab {
                for x in m.row_mut(r) {
                    *x = dist.sample(rng);
                }
            }
            m
        };
        Self {
            user: schema.user.iter().map(&mut make).collect(),
            item: schema.item.iter().map(&mut make).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            user: self
                .user
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
            item: self
                .item
                .iter()
                .map(|m| Mat::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    /// Row `idx` of `table`, or the reserved row 0 when out of range.
    pub fn lookup(table: &Mat, idx: usize) -> &[f64] {
        if idx < table.rows() {
            table.row(idx)
        } else {
            table.row(0)
        }
    }

    pub fn tables(&self) -> impl Iterator<Item = &Mat> {
        self.user.iter().chain(&self.item)
    }

    pub fn tables_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.user.iter_mut().chain(self.item.iter_mut())
    }
}

/// Input for one item feature slot: a table row, or fixed values that bypass
/// the table (used for simulated cold items).
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Row(usize),
    Fixed(Vec<f64>),
}

/// One encoded interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// One row index per user feature.
    pub user: Vec<usize>,
    pub item: Vec<Slot>,
    pub label: f64,
}

impl Example {
    pub fn new(user: Vec<usize>, item: Vec<usize>, label: f64) -> Self {
        Self {
            user,
            item: item.into_iter().map(Slot::Row).collect(),
            label,
        }
    }

    /// Row index of the item feature `q`, if it is table-backed.
    pub fn item_row(&self, q: usize) -> Option<usize> {
        match &self.item[q] {
            Slot::Row(r) => Some(*r),
            Slot::Fixed(_) => None,
        }
    }
}

/// `e_u`: concatenated user feature rows.
pub fn embed_user(user: &[usize], tables: &EmbeddingTables) -> Vec<f64> {
    user.iter()
        .zip(&tables.user)
        .flat_map(|(&idx, t)| EmbeddingTables::lookup(t, idx).iter().copied())
        .collect()
}

/// `e_i`: concatenated item feature slots in schema order.
pub fn embed_item(item: &[Slot], tables: &EmbeddingTables) -> Vec<f64> {
    item.iter()
        .zip(&tables.item)
        .flat_map(|(slot, t)| match slot {
            Slot::Row(idx) => EmbeddingTables::lookup(t, *idx).to_vec(),
            Slot::Fixed(v) => v.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: Mat,
    /// `1 × out`
    pub b: Mat,
}

/// One tower: ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerNet {
    pub layers: Vec<Layer>,
}

impl TowerNet {
    /// He-initialised weights, zero biases. `dims = [in, h1, ..., out]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                let data = (0..out * fan_in).map(|_| normal.sample(rng)).collect();
                Layer {
                    w: Mat::new(out, fan_in, data).expect("shape"),
                    b: Mat::zeros(1, out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows())
    }

    fn check(&self) -> Result<(), NumError> {
        for pair in self.layers.windows(2) {
            if pair[0].w.rows() != pair[1].w.cols() {
                return Err(NumError::DimMismatch {
                    op: "tower",
                    expected: format!("layer input {}", pair[0].w.rows()),
                    found: format!("{}", pair[1].w.cols()),
                });
            }
        }
        Ok(())
    }

    /// Layers `1..=upto`, each followed by ReLU unless it is the final layer.
    fn run(&self, e: &[f64], upto: usize, relu_last: bool) -> Result<Vec<f64>, NumError> {
        self.check()?;
        let mut h = e.to_vec();
        for (l, layer) in self.layers[..upto].iter().enumerate() {
            let mut y = layer.w.matvec(&h)?;
            for (a, &b) in y.iter_mut().zip(layer.b.as_slice()) {
                *a += b;
            }
            if l + 1 < self.layers.len() || relu_last {
                for a in &mut y {
                    if *a <= 0.0 {
                        *a = 0.0;
                    }
                }
            }
            h = y;
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(NumError::NonFinite {
                op: "tower_forward",
            });
        }
        Ok(h)
    }

    /// Top representation `z = f_L ∘ … ∘ f_1(e)`.
    pub fn forward(&self, e: &[f64]) -> Result<Vec<f64>, NumError> {
        self.run(e, self.layers.len(), false)
    }

    /// Output of layer `L−1` (after its ReLU); the input itself when `L = 1`.
    pub fn penultimate(&self, e: &[f64]) -> Result<Vec<f64>, NumError> {
        self.run(e, self.layers.len().saturating_sub(1), true)
    }
}

/// Network parameters of both towers: `Θ` or a task's `Ω^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub user: TowerNet,
    pub item: TowerNet,
}

impl NetParams {
    pub fn init<R: Rng>(
        schema: &FeatureSchema,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(out_dim);
            d
        };
        let user = TowerNet::init(&dims(schema.user_dim()), rng);
        let item = TowerNet::init(&dims(schema.item_dim()), rng);
        Self { user, item }
    }

    /// Weight and bias tensors in fixed order: user layers then item layers.
    pub fn tensors(&self) -> Vec<&Mat> {
        self.user
            .layers
            .iter()
            .chain(&self.item.layers)
            .flat_map(|l| [&l.w, &l.b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.user
            .layers
            .iter_mut()
            .chain(self.item.layers.iter_mut())
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn n_tensors(&self) -> usize {
        2 * (self.user.layers.len() + self.item.layers.len())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.scale(0.0);
        }
        z
    }

    /// `self += a · other`, tensor by tensor.
    pub fn axpy(&mut self, a: f64, other: &NetParams) -> Result<(), NumError> {
        for (x, y) in self.tensors_mut().into_iter().zip(other.tensors()) {
            x.axpy(a, y)?;
        }
        Ok(())
    }

    /// Per-tensor Frobenius inner products.
    pub fn tensor_dots(&self, other: &NetParams) -> Result<Vec<f64>, NumError> {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .map(|(a, b)| a.dot(b))
            .collect()
    }

    /// Multiplies tensor `k` by `scales[k]` in place.
    pub fn scale_tensors(&mut self, scales: &[f64]) {
        for (t, &s) in self.tensors_mut().into_iter().zip(scales) {
            t.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// In-batch softmax probability of the positive candidate:
/// `exp(z_pos·z_i/τ) / Σ_u' exp(z_u'·z_i/τ)`, computed with max-subtraction.
pub fn predict_inbatch(
    z_users: &[Vec<f64>],
    z_item: &[f64],
    positive: usize,
    tau: f64,
) -> Result<f64, NumError> {
    if z_users.is_empty() {
        return Err(NumError::EmptyBatch {
            op: "predict_inbatch",
        });
    }
    if positive >= z_users.len() {
        return Err(NumError::DimMismatch {
            op: "predict_inbatch",
            expected: format!("positive < {}", z_users.len()),
            found: positive.to_string(),
        });
    }
    let logits = z_users
        .iter()
        .map(|zu| dot(zu, z_item).map(|d| d / tau))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(crate::numcore::softmax(&logits)[positive])
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::DimMismatch {
            op: "dot",
            expected: format!("len {}", a.len()),
            found: format!("len {}", b.len()),
        });
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(layers: &[(f64, f64)]) -> TowerNet {
        TowerNet {
            layers: layers
                .iter()
                .map(|&(w, b)| Layer {
                    w: Mat::row_vector(vec![w]),
                    b: Mat::row_vector(vec![b]),
                })
                .collect(),
        }
    }

    fn two_feature_tables() -> EmbeddingTables {
        EmbeddingTables {
            user: vec![
                Mat::from_rows(&[vec![0.0, 0.0], vec![0.1, 0.2]]).unwrap(),
                Mat::from_rows(&[vec![0.0], vec![2.0]]).unwrap(),
            ],
            item: vec![
                Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
                Mat::from_rows(&[vec![0.0], vec![2.0]]).unwrap(),
            ],
        }
    }

    #[test]
    fn embedding_lookup_concatenates() {
        let t = two_feature_tables();
        assert_eq!(embed_user(&[1], &t), vec![0.1, 0.2]);
        assert_eq!(embed_user(&[1, 1], &t), vec![0.1, 0.2, 2.0]);
        assert_eq!(embed_user(&[99], &t), vec![0.0, 0.0]);
        assert_eq!(
            embed_item(&[Slot::Row(1), Slot::Row(1)], &t),
            vec![1.0, 2.0]
        );
        assert_eq!(embed_item(&[Slot::Row(1)], &t), vec![1.0]);
        assert_eq!(
            embed_item(&[Slot::Row(7), Slot::Row(1)], &t),
            vec![0.0, 2.0]
        );
    }

    #[test]
    fn init_reserves_zero_row() {
        let schema = FeatureSchema {
            user: vec![FeatureSpec::new("u", 5, 3, FeatureKind::BehaviorId)],
            item: vec![FeatureSpec::new("i", 4, 2, FeatureKind::BehaviorId)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTables::init(&schema, &mut rng);
        assert!(t.user[0].row(0).iter().all(|&x| x == 0.0));
        assert!(t.user[0]
            .row(1)
            .iter()
            .all(|&x| x.abs() <= EMBED_INIT_RANGE && x != 0.0));
    }

    #[test]
    fn tower_forward_cases() {
        let id = TowerNet {
            layers: vec![Layer {
                w: Mat::identity(3),
                b: Mat::zeros(1, 3),
            }],
        };
        assert_eq!(id.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);

        let zero = TowerNet {
            layers: vec![
                Layer {
                    w: Mat::zeros(2, 3),
                    b: Mat::zeros(1, 2),
                },
                Layer {
                    w: Mat::zeros(2, 2),
                    b: Mat::row_vector(vec![0.5, -0.5]),
                },
            ],
        };
        assert_eq!(zero.forward(&[1.0, 1.0, 1.0]).unwrap(), vec![0.5, -0.5]);

        // 3·relu(2·1 + 0) + 1
        assert_eq!(
            scalar_net(&[(2.0, 0.0), (3.0, 1.0)])
                .forward(&[1.0])
                .unwrap(),
            vec![7.0]
        );
        // final layer stays linear
        assert_eq!(
            scalar_net(&[(1.0, 0.0), (-1.0, 0.0)])
                .forward(&[2.0])
                .unwrap(),
            vec![-2.0]
        );
        assert!(id.forward(&[1.0]).is_err());
    }

    #[test]
    fn predict_inbatch_cases() {
        assert_eq!(predict_inbatch(&[vec![0.3]], &[2.0], 0, 0.2).unwrap(), 1.0);
        let p = predict_inbatch(&[vec![1.0], vec![1.0]], &[0.4], 0, 0.2).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let p = predict_inbatch(&[vec![2.0], vec![0.0]], &[1.0], 0, 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((p - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p - 0.8808).abs() < 1e-4);
        assert!(predict_inbatch(&[], &[1.0], 0, 1.0).is_err());
    }

    #[test]
    fn schema_validation() {
        let mut s = FeatureSchema {
            user: vec![FeatureSpec::new("u", 5, 3, FeatureKind::BehaviorId)],
            item: vec![
                FeatureSpec::new("i", 4, 2, FeatureKind::BehaviorId),
                FeatureSpec::new("g", 4, 2, FeatureKind::Content),
            ],
        };
        assert!(s.validate().is_ok());
        assert_eq!(s.item_slot_range(1), 2..4);
        s.item[1].kind = FeatureKind::BehaviorId;
        assert!(s.validate().is_err());
    }
}
