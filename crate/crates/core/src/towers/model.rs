//! Building the two-tower loss on a tape and pulling gradients back out.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::{EmbeddingTables, Example, Layer, NetParams, Slot, TowerNet};
use crate::numcore::{Dual, Gradients, Mat, NumError, Scalar, Tape, Var};

/// Sparse per-row gradient of one embedding table.
pub type SparseRows = BTreeMap<usize, Vec<f64>>;

fn add_row(rows: &mut SparseRows, idx: usize, g: &[f64], scale: f64) {
    let entry = rows.entry(idx).or_insert_with(|| vec![0.0; g.len()]);
    for (a, &b) in entry.iter_mut().zip(g) {
        *a += scale * b;
    }
}

/// Gradients of the embedding tables `Φ`, keyed by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableGrads {
    pub user: Vec<SparseRows>,
    pub item: Vec<SparseRows>,
}

impl TableGrads {
    pub fn new(n_user: usize, n_item: usize) -> Self {
        Self {
            user: vec![SparseRows::new(); n_user],
            item: vec![SparseRows::new(); n_item],
        }
    }

    pub fn for_tables(tables: &EmbeddingTables) -> Self {
        Self::new(tables.user.len(), tables.item.len())
    }

    /// `self += a · other`, accumulated in row order.
    pub fn axpy(&mut self, a: f64, other: &TableGrads) {
        for (mine, theirs) in self
            .user
            .iter_mut()
            .chain(self.item.iter_mut())
            .zip(other.user.iter().chain(&other.item))
        {
            for (&idx, g) in theirs {
                add_row(mine, idx, g, a);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.user.iter().chain(&self.item).all(BTreeMap::is_empty)
    }

    pub fn all_finite(&self) -> bool {
        self.user
            .iter()
            .chain(&self.item)
            .all(|t| t.values().all(|r| r.iter().all(|x| x.is_finite())))
    }

    /// Gradient of `row` in table `table`, counting user tables first.
    pub fn row_of(&self, table: usize, row: usize) -> Option<&Vec<f64>> {
        let n_user = self.user.len();
        if table < n_user {
            self.user[table].get(&row)
        } else {
            self.item[table - n_user].get(&row)
        }
    }
}

pub struct TapeLayer {
    pub w: Var,
    pub b: Var,
}

pub struct TapeNet {
    pub user: Vec<TapeLayer>,
    pub item: Vec<TapeLayer>,
}

fn lift_mat<T: Scalar>(m: &Mat, tangent: Option<&Mat>) -> Mat<T> {
    match tangent {
        None => m.map(T::from_f64),
        Some(t) => {
            let data = m
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&r, &d)| T::lift(r, d))
                .collect();
            Mat::new(m.rows(), m.cols(), data).expect("same shape")
        }
    }
}

fn tower_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &TowerNet,
    tangent: Option<&TowerNet>,
) -> Result<Vec<TapeLayer>, NumError> {
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let tl = tangent.map(|t| &t.layers[l]);
            Ok(TapeLayer {
                w: tape.leaf(lift_mat(&layer.w, tl.map(|t| &t.w)))?,
                b: tape.leaf(lift_mat(&layer.b, tl.map(|t| &t.b)))?,
            })
        })
        .collect()
}

/// Registers `net` as tape leaves. With `tangent`, each leaf carries that
/// direction as its dual part.
pub fn net_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &NetParams,
    tangent: Option<&NetParams>,
) -> Result<TapeNet, NumError> {
    Ok(TapeNet {
        user: tower_on_tape(tape, &net.user, tangent.map(|t| &t.user))?,
        item: tower_on_tape(tape, &net.item, tangent.map(|t| &t.item))?,
    })
}

impl TapeNet {
    /// Gradient of every layer, projected to `f64` with `part`.
    pub fn grads<T: Scalar>(&self, g: &Gradients<T>, part: impl Fn(T) -> f64) -> NetParams {
        let tower = |layers: &[TapeLayer]| TowerNet {
            layers: layers
                .iter()
                .map(|l| Layer {
                    w: g.wrt(l.w).map(&part),
                    b: g.wrt(l.b).map(&part),
                })
                .collect(),
        };
        NetParams {
            user: tower(&self.user),
            item: tower(&self.item),
        }
    }
}

/// Runs all layers; ReLU between layers, none after the last.
pub fn tower_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layers: &[TapeLayer],
) -> Result<Var, NumError> {
    let mut h = x;
    for (l, layer) in layers.iter().enumerate() {
        h = tape.linear(h, layer.w, layer.b)?;
        if l + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Runs layers `1..L−1`, each with ReLU: the penultimate representation.
pub fn tower_hidden_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layers: &[TapeLayer],
) -> Result<Var, NumError> {
    let mut h = x;
    for layer in &layers[..layers.len().saturating_sub(1)] {
        h = tape.linear(h, layer.w, layer.b)?;
        h = tape.relu(h)?;
    }
    Ok(h)
}

/// Distinct user feature tuples in first-appearance order, and each
/// example's index into that list.
pub fn distinct_users(examples: &[Example]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut index: HashMap<&[usize], usize> = HashMap::new();
    let mut users = Vec::new();
    let mut positives = Vec::with_capacity(examples.len());
    for ex in examples {
        let next = users.len();
        let k = *index.entry(ex.user.as_slice()).or_insert_with(|| {
            users.push(ex.user.clone());
            next
        });
        positives.push(k);
    }
    (users, positives)
}

fn clamp_row(table: &Mat, idx: usize) -> usize {
    if idx < table.rows() {
        idx
    } else {
        0
    }
}

/// Item embedding leaves (one per feature) and their concatenation.
pub fn embed_items_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &EmbeddingTables,
    examples: &[Example],
) -> Result<(Vec<Var>, Var), NumError> {
    let mut leaves = Vec::with_capacity(tables.item.len());
    for (q, table) in tables.item.iter().enumerate() {
        let mut data = Vec::with_capacity(examples.len() * table.cols());
        for ex in examples {
            match &ex.item[q] {
                Slot::Row(r) => data.extend(
                    EmbeddingTables::lookup(table, *r)
                        .iter()
                        .map(|&x| T::from_f64(x)),
                ),
                Slot::Fixed(v) => {
                    if v.len() != table.cols() {
                        return Err(NumError::DimMismatch {
                            op: "embed_items",
                            expected: format!("slot width {}", table.cols()),
                            found: v.len().to_string(),
                        });
                    }
                    data.extend(v.iter().map(|&x| T::from_f64(x)));
                }
            }
        }
        leaves.push(tape.leaf(Mat::new(examples.len(), table.cols(), data)?)?);
    }
    let cat = tape.concat_cols(&leaves)?;
    Ok((leaves, cat))
}

/// Tape handles for one batch loss.
pub struct BatchTape {
    pub loss: Var,
    pub users: Vec<Vec<usize>>,
    pub user_leaves: Vec<Var>,
    pub item_leaves: Vec<Var>,
}

impl BatchTape {
    /// Scatters embedding-leaf gradients back onto table rows. Fixed slots
    /// receive nothing.
    pub fn table_grads<T: Scalar>(
        &self,
        g: &Gradients<T>,
        tables: &EmbeddingTables,
        examples: &[Example],
        part: impl Fn(T) -> f64,
    ) -> TableGrads {
        let mut out = TableGrads::for_tables(tables);
        for (p, &leaf) in self.user_leaves.iter().enumerate() {
            if let Some(gm) = g.get(leaf) {
                for (k, user) in self.users.iter().enumerate() {
                    let row: Vec<f64> = gm.row(k).iter().map(|&x| part(x)).collect();
                    add_row(
                        &mut out.user[p],
                        clamp_row(&tables.user[p], user[p]),
                        &row,
                        1.0,
                    );
                }
            }
        }
        for (q, &leaf) in self.item_leaves.iter().enumerate() {
            if let Some(gm) = g.get(leaf) {
                for (k, ex) in examples.iter().enumerate() {
                    if let Some(r) = ex.item_row(q) {
                        let row: Vec<f64> = gm.row(k).iter().map(|&x| part(x)).collect();
                        add_row(&mut out.item[q], clamp_row(&tables.item[q], r), &row, 1.0);
                    }
                }
            }
        }
        out
    }
}

/// Records the in-batch log loss `L_T` of `examples` under `net`.
pub fn batch_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &EmbeddingTables,
    net: &TapeNet,
    examples: &[Example],
    tau: f64,
) -> Result<BatchTape, NumError> {
    if examples.is_empty() {
        return Err(NumError::EmptyBatch { op: "task_loss" });
    }
    let (users, positives) = distinct_users(examples);
    let mut user_leaves = Vec::with_capacity(tables.user.len());
    for (p, table) in tables.user.iter().enumerate() {
        let mut data = Vec::with_capacity(users.len() * table.cols());
        for u in &users {
            data.extend(
                EmbeddingTables::lookup(table, u[p])
                    .iter()
                    .map(|&x| T::from_f64(x)),
            );
        }
        user_leaves.push(tape.leaf(Mat::new(users.len(), table.cols(), data)?)?);
    }
    let eu = tape.concat_cols(&user_leaves)?;
    let zu = tower_forward_tape(tape, eu, &net.user)?;
    let (item_leaves, ei) = embed_items_on_tape(tape, tables, examples)?;
    let zi = tower_forward_tape(tape, ei, &net.item)?;
    let s = tape.scores(zu, zi, 1.0 / tau)?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let loss = tape.inbatch_log_loss(s, &positives, &labels)?;
    Ok(BatchTape {
        loss,
        users,
        user_leaves,
        item_leaves,
    })
}

/// Loss value and gradients for every parameter family.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub net: NetParams,
    pub tables: TableGrads,
}

/// `L_T(net, Φ | examples)`.
pub fn task_loss(
    tables: &EmbeddingTables,
    net: &NetParams,
    examples: &[Example],
    tau: f64,
) -> Result<f64, NumError> {
    let mut tape: Tape<f64> = Tape::new();
    let tn = net_on_tape(&mut tape, net, None)?;
    let bt = batch_loss_on_tape(&mut tape, tables, &tn, examples, tau)?;
    Ok(tape.scalar(bt.loss))
}

/// `L_T` and its gradient with respect to the network and the tables.
pub fn task_loss_grad(
    tables: &EmbeddingTables,
    net: &NetParams,
    examples: &[Example],
    tau: f64,
) -> Result<LossGrad, NumError> {
    let mut tape: Tape<f64> = Tape::new();
    let tn = net_on_tape(&mut tape, net, None)?;
    let bt = batch_loss_on_tape(&mut tape, tables, &tn, examples, tau)?;
    let g = tape.backward(bt.loss)?;
    Ok(LossGrad {
        loss: tape.scalar(bt.loss),
        net: tn.grads(&g, |x| x),
        tables: bt.table_grads(&g, tables, examples, |x| x),
    })
}

/// Forward-over-reverse pass with the network perturbed along `direction`.
///
/// Returns the ordinary gradient together with `H_θθ·v` and `H_φθ·v`, the
/// directional derivatives of the network and table gradients.
pub fn task_loss_hvp(
    tables: &EmbeddingTables,
    net: &NetParams,
    direction: &NetParams,
    examples: &[Example],
    tau: f64,
) -> Result<(LossGrad, NetParams, TableGrads), NumError> {
    let mut tape: Tape<Dual> = Tape::new();
    let tn = net_on_tape(&mut tape, net, Some(direction))?;
    let bt = batch_loss_on_tape(&mut tape, tables, &tn, examples, tau)?;
    let g = tape.backward(bt.loss)?;
    let primal = LossGrad {
        loss: tape.scalar(bt.loss).re,
        net: tn.grads(&g, |x: Dual| x.re),
        tables: bt.table_grads(&g, tables, examples, |x: Dual| x.re),
    };
    let hv_net = tn.grads(&g, |x: Dual| x.du);
    let hv_tables = bt.table_grads(&g, tables, examples, |x: Dual| x.du);
    Ok((primal, hv_net, hv_tables))
}
