//! Batched reverse-mode tape.
//!
//! Every node holds a whole matrix (a batch of row vectors), so one tape
//! entry covers a full layer application. The primitive set is exactly what
//! the two-tower model needs: linear map, bias add, ReLU, in-batch dot
//! products, softmax log loss, MSE against a fixed target and a
//! scalar-weighted sum of losses.

use super::mat::Mat;
use super::scalar::Scalar;
use super::NumError;

/// Clamp bounds applied to in-batch predictions before the log loss.
pub const PRED_CLAMP_LO: f64 = 1e-7;
pub const PRED_CLAMP_HI: f64 = 1.0 - 1e-7;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMulT {
        x: usize,
        w: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Scores {
        zu: usize,
        zi: usize,
        scale: f64,
    },
    InBatchLogLoss {
        scores: usize,
        positives: Vec<usize>,
        labels: Vec<f64>,
        probs: Mat<T>,
        yhat: Vec<T>,
        clamped: Vec<bool>,
    },
    MseTarget {
        x: usize,
        target: Mat<T>,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Mat<T>,
}

/// Ordered record of primitive applications with their forward values.
#[derive(Debug, Clone, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> NumError {
    NumError::DimMismatch {
        op,
        expected: expected.into(),
        found: found.into(),
    }
}

/// Numerically stable softmax of one column of logits.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits
        .iter()
        .map(|x| x.re())
        .fold(f64::NEG_INFINITY, f64::max);
    let m = T::from_f64(m);
    let exps: Vec<T> = logits.iter().map(|&x| (x - m).exp()).collect();
    let mut z = T::zero();
    for &e in &exps {
        z += e;
    }
    exps.into_iter().map(|e| e / z).collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, name: &'static str) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Mat<T>) -> Result<Var, NumError> {
        self.push(Op::Leaf, value, "leaf")
    }

    /// `x · Wᵀ` for a batch `x` of shape `B × in` and `W` of shape `out × in`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var, NumError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(mismatch(
                "matmul_t",
                format!("input width {}", wv.cols()),
                format!("{}", xv.cols()),
            ));
        }
        let (b, out) = (xv.rows(), wv.rows());
        let mut y = Mat::zeros(b, out);
        for r in 0..b {
            let xr = xv.row(r);
            for o in 0..out {
                let mut acc = T::zero();
                for (&a, &c) in xr.iter().zip(wv.row(o)) {
                    acc += a * c;
                }
                y.set(r, o, acc);
            }
        }
        self.push(Op::MatMulT { x: x.0, w: w.0 }, y, "matmul_t")
    }

    /// Adds the `1 × out` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(mismatch(
                "add_bias",
                format!("(1, {})", xv.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (a, &c) in y.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *a += c;
            }
        }
        self.push(Op::AddBias { x: x.0, b: b.0 }, y, "add_bias")
    }

    /// `x · Wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let h = self.matmul_t(x, w)?;
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let y = self
            .value(x)
            .map(|v| if v.re() > 0.0 { v } else { T::zero() });
        self.push(Op::Relu { x: x.0 }, y, "relu")
    }

    /// Horizontal concatenation of batches with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or(NumError::EmptyBatch { op: "concat_cols" })?;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let y = Mat::new(rows, cols, data)?;
        self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            y,
            "concat_cols",
        )
    }

    /// In-batch dot products: `S[u][k] = scale · (zu_u · zi_k)`, shape `U × B`.
    pub fn scores(&mut self, zu: Var, zi: Var, scale: f64) -> Result<Var, NumError> {
        let (uv, iv) = (self.value(zu), self.value(zi));
        if uv.cols() != iv.cols() {
            return Err(mismatch(
                "scores",
                format!("width {}", uv.cols()),
                format!("{}", iv.cols()),
            ));
        }
        let s = T::from_f64(scale);
        let mut y = Mat::zeros(uv.rows(), iv.rows());
        for u in 0..uv.rows() {
            for k in 0..iv.rows() {
                let mut acc = T::zero();
                for (&a, &b) in uv.row(u).iter().zip(iv.row(k)) {
                    acc += a * b;
                }
                y.set(u, k, acc * s);
            }
        }
        self.push(
            Op::Scores {
                zu: zu.0,
                zi: zi.0,
                scale,
            },
            y,
            "scores",
        )
    }

    /// Mean binary log loss of in-batch softmax predictions.
    ///
    /// Column `k` of `scores` holds the logits of every candidate user
    /// against interaction `k`; `positives[k]` is the row of the user who
    /// actually interacted. Predictions are clamped to
    /// `[PRED_CLAMP_LO, PRED_CLAMP_HI]`, with zero gradient when clamped.
    pub fn inbatch_log_loss(
        &mut self,
        scores: Var,
        positives: &[usize],
        labels: &[f64],
    ) -> Result<Var, NumError> {
        let sv = self.value(scores);
        let (u, b) = sv.shape();
        if u == 0 || b == 0 {
            return Err(NumError::EmptyBatch {
                op: "inbatch_log_loss",
            });
        }
        if positives.len() != b || labels.len() != b {
            return Err(mismatch(
                "inbatch_log_loss",
                format!("{b} positives and labels"),
                format!("{} / {}", positives.len(), labels.len()),
            ));
        }
        if let Some(&p) = positives.iter().find(|&&p| p >= u) {
            return Err(mismatch(
                "inbatch_log_loss",
                format!("positive < {u}"),
                format!("{p}"),
            ));
        }
        let mut probs = Mat::zeros(u, b);
        let mut yhat = Vec::with_capacity(b);
        let mut clamped = Vec::with_capacity(b);
        let mut total = T::zero();
        let mut col = vec![T::zero(); u];
        for k in 0..b {
            for (j, c) in col.iter_mut().enumerate() {
                *c = sv.get(j, k);
            }
            let p = softmax(&col);
            for (j, &pj) in p.iter().enumerate() {
                probs.set(j, k, pj);
            }
            let raw = p[positives[k]];
            let (y_c, is_clamped) = if raw.re() < PRED_CLAMP_LO {
                (T::from_f64(PRED_CLAMP_LO), true)
            } else if raw.re() > PRED_CLAMP_HI {
                (T::from_f64(PRED_CLAMP_HI), true)
            } else {
                (raw, false)
            };
            let y = labels[k];
            let term = -(T::from_f64(y) * y_c.ln()) - T::from_f64(1.0 - y) * (T::one() - y_c).ln();
            total += term;
            yhat.push(raw);
            clamped.push(is_clamped);
        }
        let loss = Mat::row_vector(vec![total / T::from_f64(b as f64)]);
        self.push(
            Op::InBatchLogLoss {
                scores: scores.0,
                positives: positives.to_vec(),
                labels: labels.to_vec(),
                probs,
                yhat,
                clamped,
            },
            loss,
            "inbatch_log_loss",
        )
    }

    /// `mean_b (1/d) ‖x_b − target_b‖²` with the target held fixed.
    pub fn mse_to_target(&mut self, x: Var, target: Mat<T>) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(mismatch(
                "mse_to_target",
                format!("{:?}", xv.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if xv.is_empty() {
            return Err(NumError::EmptyBatch {
                op: "mse_to_target",
            });
        }
        let mut acc = T::zero();
        for (&a, &t) in xv.as_slice().iter().zip(target.as_slice()) {
            let d = a - t;
            acc += d * d;
        }
        let loss = Mat::row_vector(vec![acc / T::from_f64(xv.len() as f64)]);
        self.push(Op::MseTarget { x: x.0, target }, loss, "mse_to_target")
    }

    /// `Σ wᵢ · lossᵢ` over `1 × 1` nodes. An empty list is the constant 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumError> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.shape() != (1, 1) {
                return Err(mismatch(
                    "weighted_sum",
                    "(1, 1)",
                    format!("{:?}", val.shape()),
                ));
            }
            acc += T::from_f64(w) * val.get(0, 0);
        }
        self.push(
            Op::WeightedSum {
                terms: terms.iter().map(|&(v, w)| (v.0, w)).collect(),
            },
            Mat::row_vector(vec![acc]),
            "weighted_sum",
        )
    }

    /// Reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        if self.nodes.is_empty() {
            return Err(NumError::EmptyTape);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(mismatch(
                "backward",
                "(1, 1) loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::row_vector(vec![T::one()]));

        fn acc<T: Scalar>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
            match slot {
                Some(existing) => {
                    for (a, &b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMulT { x, w } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (b, inp) = xv.shape();
                    let out = wv.rows();
                    let mut dx = Mat::zeros(b, inp);
                    let mut dw = Mat::zeros(out, inp);
                    for r in 0..b {
                        let gr = g.row(r);
                        for (o, &go) in gr.iter().enumerate() {
                            let wrow = wv.row(o);
                            let dxr = dx.row_mut(r);
                            for (d, &wk) in dxr.iter_mut().zip(wrow) {
                                *d += go * wk;
                            }
                        }
                    }
                    for o in 0..out {
                        let dwr = dw.row_mut(o);
                        for r in 0..b {
                            let go = g.get(r, o);
                            for (d, &xk) in dwr.iter_mut().zip(xv.row(r)) {
                                *d += go * xk;
                            }
                        }
                    }
                    acc(&mut grads[*x], dx);
                    acc(&mut grads[*w], dw);
                }
                Op::AddBias { x, b } => {
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &gv) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    acc(&mut grads[*x], g);
                    acc(&mut grads[*b], db);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &xin) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xin.re() <= 0.0 {
                            *d = T::zero();
                        }
                    }
                    acc(&mut grads[*x], dx);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.nodes[p].value.shape();
                        let mut dp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads[p], dp);
                    }
                }
                Op::Scores { zu, zi, scale } => {
                    let uv = &self.nodes[*zu].value;
                    let iv = &self.nodes[*zi].value;
                    let s = T::from_f64(*scale);
                    let mut du = Mat::zeros(uv.rows(), uv.cols());
                    let mut di = Mat::zeros(iv.rows(), iv.cols());
                    for u in 0..uv.rows() {
                        for k in 0..iv.rows() {
                            let gs = g.get(u, k) * s;
                            for (d, &x) in du.row_mut(u).iter_mut().zip(iv.row(k)) {
                                *d += gs * x;
                            }
                        }
                    }
                    for k in 0..iv.rows() {
                        for u in 0..uv.rows() {
                            let gs = g.get(u, k) * s;
                            for (d, &x) in di.row_mut(k).iter_mut().zip(uv.row(u)) {
                                *d += gs * x;
                            }
                        }
                    }
                    acc(&mut grads[*zu], du);
                    acc(&mut grads[*zi], di);
                }
                Op::InBatchLogLoss {
                    scores,
                    positives,
                    labels,
                    probs,
                    yhat,
                    clamped,
                } => {
                    let (u, b) = probs.shape();
                    let upstream = g.get(0, 0) / T::from_f64(b as f64);
                    let mut ds = Mat::zeros(u, b);
                    for k in 0..b {
                        if clamped[k] {
                            continue;
                        }
                        let yh = yhat[k];
                        let y = T::from_f64(labels[k]);
                        let dl_dy = upstream * (-(y / yh) + (T::one() - y) / (T::one() - yh));
                        for j in 0..u {
                            let delta = if j == positives[k] {
                                T::one()
                            } else {
                                T::zero()
                            };
                            ds.set(j, k, dl_dy * yh * (delta - probs.get(j, k)));
                        }
                    }
                    acc(&mut grads[*scores], ds);
                }
                Op::MseTarget { x, target } => {
                    let xv = &self.nodes[*x].value;
                    let c = g.get(0, 0) * T::from_f64(2.0 / xv.len() as f64);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for ((d, &a), &t) in dx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(target.as_slice())
                    {
                        *d = c * (a - t);
                    }
                    acc(&mut grads[*x], dx);
                }
                Op::WeightedSum { terms } => {
                    let gv = g.get(0, 0);
                    for &(v, w) in terms {
                        acc(&mut grads[v], Mat::row_vector(vec![gv * T::from_f64(w)]));
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        for (i, g) in grads.iter().enumerate() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(g) = g {
                    if !g.all_finite() {
                        return Err(NumError::NonFinite { op: "backward" });
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T = f64> {
    grads: Vec<Option<Mat<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; exact zeros if the loss
    /// never touched it.
    pub fn wrt(&self, v: Var) -> Mat<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }
}
