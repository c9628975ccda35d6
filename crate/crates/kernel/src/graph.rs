use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, KernelError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Broadcast(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ColSum(Var),
    Sum(Var),
    Relu(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Array2<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_valid: Vec<bool>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        probs: Array2<T>,
    },
    Mse {
        pred: Var,
        target: Array2<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Array2<T>,
    requires_grad: bool,
}

/// A tape of recorded operations.
///
/// Nodes are appended in evaluation order, so recording order is a valid
/// topological order and [`Graph::backward`] simply walks it in reverse.
/// Parameter leaves read their values from the borrowed [`ParamStore`]
/// instead of copying them.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    params: Vec<Option<Array2<T>>>,
    leaves: HashMap<usize, Array2<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn col_vector<T: Real>(v: ndarray::Array1<T>) -> Array2<T> {
    let n = v.len();
    v.into_shape_with_order((n, 1)).expect("column reshape")
}

fn row_vector<T: Real>(v: ndarray::Array1<T>) -> Array2<T> {
    let n = v.len();
    v.into_shape_with_order((1, n)).expect("row reshape")
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id).view(),
            _ => self.nodes[v.0].value.view(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(KernelError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (gradients are reported by [`Gradients::wrt`]).
    pub fn input(&mut self, value: Array2<T>) -> Result<Var> {
        self.push(Op::Leaf, value, true, "input")
    }

    pub fn constant(&mut self, value: Array2<T>) -> Result<Var> {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Array2::zeros((0, 0)),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.dim(), bv.dim())));
        }
        let out = av.dot(&bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = &self.value(a) - &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg, "mul")
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, _) = self.shape(a);
        if self.shape(bias) != (r, 1) {
            return Err(shape_err("add_col", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let out = &self.value(a) + &self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddCol(a, bias), out, rg, "add_col")
    }

    /// Scales column `j` of `a` by `s[0, j]`.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Result<Var> {
        let (_, c) = self.shape(a);
        if self.shape(s) != (1, c) {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", self.shape(a), self.shape(s))));
        }
        let out = &self.value(a) * &self.value(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::MulRow(a, s), out, rg, "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg, "scale")
    }

    /// Repeats a 1x1 value into a `rows x cols` matrix.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(a) != (1, 1) {
            return Err(shape_err("broadcast", format!("{:?} is not 1x1", self.shape(a))));
        }
        let out = Array2::from_elem((rows, cols), self.scalar(a));
        let rg = self.rg(a);
        self.push(Op::Broadcast(a), out, rg, "broadcast")
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| shape_err("concat_rows", e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, rg, "concat_rows")
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat_cols", e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, rg, "concat_cols")
    }

    /// Gathers columns (indices may repeat).
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n = av.ncols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(KernelError::Index {
                op: "select_cols",
                index: bad,
                len: n,
            });
        }
        let out = av.select(Axis(1), idx);
        let rg = self.rg(a);
        self.push(Op::SelectCols(a, idx.to_vec()), out, rg, "select_cols")
    }

    /// Gathers rows (indices may repeat).
    pub fn row_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n = av.nrows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(KernelError::Index {
                op: "row_select",
                index: bad,
                len: n,
            });
        }
        let out = av.select(Axis(0), idx);
        let rg = self.rg(a);
        self.push(Op::SelectRows(a, idx.to_vec()), out, rg, "row_select")
    }

    /// Column sums as a `1 x cols` row.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let out = row_vector(self.value(a).sum_axis(Axis(0)));
        let rg = self.rg(a);
        self.push(Op::ColSum(a), out, rg, "col_sum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), out, rg, "sum")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let zero = T::zero();
        let out = self.value(a).mapv(|x| if x > zero { x } else { zero });
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg, "relu")
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let out = softmax_columns(self.value(a));
        let rg = self.rg(a);
        self.push(Op::SoftmaxCols(a), out, rg, "softmax_cols")
    }

    /// Normalizes each column to zero mean and unit variance, then applies
    /// the `rows x 1` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (d, n) = self.shape(x);
        if self.shape(gain) != (d, 1) || self.shape(bias) != (d, 1) {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", (d, n), self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x);
        let dn = T::of(d as f64);
        let mean = xv.sum_axis(Axis(0)) / dn;
        let centered = &xv - &mean.view().insert_axis(Axis(0));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / dn;
        let eps = T::of(LAYER_NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let inv_row = ndarray::ArrayView1::from(&inv_std[..]).insert_axis(Axis(0)).to_owned();
        let normed = centered * &inv_row;
        let out = &normed * &self.value(gain) + &self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            out,
            rg,
            "layer_norm",
        )
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KernelError::Invalid {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = Array2::from_shape_fn(self.shape(x), |_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        });
        let out = &self.value(x) * &mask;
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, out, rg, "dropout")
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `d x (batch * seq_len)`; columns `b*seq_len ..
    /// (b+1)*seq_len` form sequence `b`. Rows are split into `heads` blocks
    /// of `d / heads`. For each query column the softmax runs over the key
    /// columns of its own sequence whose `key_valid` flag is set, so invalid
    /// (padding) keys get exactly zero weight. Scores are scaled by
    /// `1 / sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize, key_valid: &[bool]) -> Result<Var> {
        let (d, n) = self.shape(q);
        if self.shape(k) != (d, n) || self.shape(v) != (d, n) {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", (d, n), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || n % seq_len != 0 || key_valid.len() != n {
            return Err(shape_err(
                "attention",
                format!("d={d} heads={heads} n={n} seq_len={seq_len} mask={}", key_valid.len()),
            ));
        }
        for b in 0..n / seq_len {
            if !key_valid[b * seq_len..(b + 1) * seq_len].iter().any(|&x| x) {
                return Err(KernelError::Invalid {
                    op: "attention",
                    detail: format!("sequence {b} has no valid key"),
                });
            }
        }
        let qt = self.value(q).t().as_standard_layout().into_owned();
        let kt = self.value(k).t().as_standard_layout().into_owned();
        let vt = self.value(v).t().as_standard_layout().into_owned();
        let (qs, ks, vs) = (qt.as_slice().unwrap(), kt.as_slice().unwrap(), vt.as_slice().unwrap());
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let s = seq_len;
        let mut probs = vec![T::zero(); (n / s) * heads * s * s];
        let mut out = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); s];
        for b in 0..n / s {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s {
                    let qi = &qs[(b * s + i) * d + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..s {
                        if key_valid[b * s + j] {
                            let kj = &ks[(b * s + j) * d + off..][..dh];
                            let sc = dot(qi, kj) * scale;
                            scores[j] = sc;
                            if sc > max {
                                max = sc;
                            }
                        }
                    }
                    let mut z = T::zero();
                    for j in 0..s {
                        if key_valid[b * s + j] {
                            scores[j] = (scores[j] - max).exp();
                            z += scores[j];
                        } else {
                            scores[j] = T::zero();
                        }
                    }
                    let prow = &mut probs[((b * heads + h) * s + i) * s..][..s];
                    let orow = &mut out[(b * s + i) * d + off..][..dh];
                    for j in 0..s {
                        let p = scores[j] / z;
                        prow[j] = p;
                        if p != T::zero() {
                            let vj = &vs[(b * s + j) * d + off..][..dh];
                            for (o, &x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((n, d), out)
            .expect("attention output shape")
            .t()
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                key_valid: key_valid.to_vec(),
                probs,
            },
            out,
            rg,
            "attention",
        )
    }

    /// Mean over columns of the label-smoothed cross entropy of each logit
    /// column against its target class. The smoothed target puts
    /// `1 - eps + eps / C` on the gold class and `eps / C` elsewhere.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (c, n) = self.shape(logits);
        if targets.len() != n || n == 0 {
            return Err(shape_err(
                "cross_entropy_smoothed",
                format!("{n} logit columns, {} targets", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(KernelError::Invalid {
                op: "cross_entropy_smoothed",
                detail: format!("eps {eps} outside [0, 1)"),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(KernelError::Index {
                op: "cross_entropy_smoothed",
                index: bad,
                len: c,
            });
        }
        let lv = self.value(logits);
        let epsr = T::of(eps);
        let cr = T::of(c as f64);
        let mut probs = Array2::zeros((c, n));
        let mut total = T::zero();
        for (j, &t) in targets.iter().enumerate() {
            let col = lv.column(j);
            let max = col.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = col.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            let mut sum_logp = T::zero();
            for (r, &x) in col.iter().enumerate() {
                let logp = x - lse;
                sum_logp += logp;
                probs[[r, j]] = logp.exp();
            }
            let logp_t = col[t] - lse;
            total += -(T::one() - epsr) * logp_t - epsr / cr * sum_logp;
        }
        let out = Array2::from_elem((1, 1), total / T::of(n as f64));
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps: epsr,
                probs,
            },
            out,
            rg,
            "cross_entropy_smoothed",
        )
    }

    /// Mean squared error between a `1 x n` prediction row and fixed targets.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let (r, n) = self.shape(pred);
        if r != 1 || n != target.len() || n == 0 {
            return Err(shape_err("mse", format!("pred {:?}, {} targets", (r, n), target.len())));
        }
        let target = Array2::from_shape_vec((1, n), target.to_vec()).expect("target row");
        let diff = &self.value(pred) - &target;
        let out = Array2::from_elem((1, 1), diff.mapv(|x| x * x).sum() / T::of(n as f64));
        let rg = self.rg(pred);
        self.push(Op::Mse { pred, target }, out, rg, "mse")
    }

    /// Reverse-mode pass from a 1x1 `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(KernelError::BackwardTwice);
        }
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(KernelError::NotScalar { rows, cols });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients {
            params: (0..self.params.len()).map(|_| None).collect(),
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                },
                &Op::MatMul(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.dot(&self.value(b).t()));
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, self.value(a).t().dot(&g));
                    }
                }
                &Op::Transpose(a) => {
                    accumulate(&mut grads, a, g.t().as_standard_layout().into_owned());
                }
                &Op::Add(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, -g);
                    }
                }
                &Op::Mul(a, b) => {
                    if self.rg(a) {
                        accumulate(&mut grads, a, &g * &self.value(b));
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, &g * &self.value(a));
                    }
                }
                &Op::AddCol(a, bias) => {
                    if self.rg(bias) {
                        accumulate(&mut grads, bias, col_vector(g.sum_axis(Axis(1))));
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::MulRow(a, s) => {
                    if self.rg(s) {
                        let gs = (&g * &self.value(a)).sum_axis(Axis(0));
                        accumulate(&mut grads, s, row_vector(gs));
                    }
                    if self.rg(a) {
                        accumulate(&mut grads, a, &g * &self.value(s));
                    }
                }
                &Op::Scale(a, c) => {
                    accumulate(&mut grads, a, g.mapv(|x| x * c));
                }
                &Op::Broadcast(a) => {
                    accumulate(&mut grads, a, Array2::from_elem((1, 1), g.sum()));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.shape(p).0;
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(ndarray::s![start..start + r, ..]).to_owned());
                        }
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(ndarray::s![.., start..start + c]).to_owned());
                        }
                        start += c;
                    }
                }
                Op::SelectCols(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (j, &src) in idx.iter().enumerate() {
                        let mut dst = ga.column_mut(src);
                        dst += &g.column(j);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (j, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(j);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                &Op::ColSum(a) => {
                    let ga = g.broadcast(self.shape(a)).expect("col_sum broadcast").to_owned();
                    accumulate(&mut grads, a, ga);
                }
                &Op::Sum(a) => {
                    accumulate(&mut grads, a, Array2::from_elem(self.shape(a), g[[0, 0]]));
                }
                &Op::Relu(a) => {
                    let zero = T::zero();
                    let mut ga = g;
                    ga.zip_mut_with(&self.value(a), |gx, &x| {
                        if x <= zero {
                            *gx = zero;
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                &Op::SoftmaxCols(a) => {
                    let y = &node.value;
                    let dotcol = (&g * y).sum_axis(Axis(0));
                    let ga = y * &(&g - &dotcol.insert_axis(Axis(0)));
                    accumulate(&mut grads, a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, col_vector(g.sum_axis(Axis(1))));
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads, *gain, col_vector((&g * normed).sum_axis(Axis(1))));
                    }
                    if self.rg(*x) {
                        let d = T::of(normed.nrows() as f64);
                        let gxh = &g * &self.value(*gain);
                        let s1 = gxh.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                        let s2 = (&gxh * normed).sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                        let inv = ndarray::ArrayView1::from(&inv_std[..]).insert_axis(Axis(0)).to_owned();
                        let gx = (gxh.mapv(|v| v * d) - &s1 - &(normed * &s2)) * &inv.mapv(|v| v / d);
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, *x, &g * mask);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq_len,
                    key_valid,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, *seq_len, key_valid, probs, &g);
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    eps,
                    probs,
                } => {
                    let (c, n) = probs.dim();
                    let scale = g[[0, 0]] / T::of(n as f64);
                    let off = *eps / T::of(c as f64);
                    let mut gl = probs.mapv(|p| p - off);
                    for (j, &t) in targets.iter().enumerate() {
                        gl[[t, j]] -= T::one() - *eps;
                    }
                    gl.mapv_inplace(|x| x * scale);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Mse { pred, target } => {
                    let n = target.ncols();
                    let scale = T::of(2.0) * g[[0, 0]] / T::of(n as f64);
                    let gp = (&self.value(*pred) - target).mapv(|x| x * scale);
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        s: usize,
        key_valid: &[bool],
        probs: &[T],
        g: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let (d, n) = self.shape(q);
        let qt = self.value(q).t().as_standard_layout().into_owned();
        let kt = self.value(k).t().as_standard_layout().into_owned();
        let vt = self.value(v).t().as_standard_layout().into_owned();
        let gt = g.t().as_standard_layout().into_owned();
        let (qs, ks, vs, gs) = (
            qt.as_slice().unwrap(),
            kt.as_slice().unwrap(),
            vt.as_slice().unwrap(),
            gt.as_slice().unwrap(),
        );
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); s];
        for b in 0..n / s {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s {
                    let prow = &probs[((b * heads + h) * s + i) * s..][..s];
                    let gi = &gs[(b * s + i) * d + off..][..dh];
                    let mut weighted = T::zero();
                    for j in 0..s {
                        if !key_valid[b * s + j] {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vs[(b * s + j) * d + off..][..dh];
                        dp[j] = dot(gi, vj);
                        weighted += prow[j] * dp[j];
                        let dvj = &mut dv[(b * s + j) * d + off..][..dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    let qi = &qs[(b * s + i) * d + off..][..dh];
                    for j in 0..s {
                        if !key_valid[b * s + j] {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &ks[(b * s + j) * d + off..][..dh];
                        let dqi = &mut dq[(b * s + i) * d + off..][..dh];
                        for (o, &x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk[(b * s + j) * d + off..][..dh];
                        for (o, &x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        let back = |buf: Vec<T>| {
            Array2::from_shape_vec((n, d), buf)
                .expect("attention grad shape")
                .t()
                .as_standard_layout()
                .into_owned()
        };
        (back(dq), back(dk), back(dv))
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_columns<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    let max = x.fold_axis(Axis(0), T::neg_infinity(), |&m, &v| m.max(v));
    let mut e = &x - &max.insert_axis(Axis(0));
    e.mapv_inplace(|v| v.exp());
    let z = e.sum_axis(Axis(0));
    e / &z.insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.constant(Array2::zeros((3, 1))).unwrap();
        let y = g.softmax_cols(x).unwrap();
        for &p in g.value(y).iter() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[-2.0, 0.0, 3.0]]).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), array![[0.0, 0.0, 3.0]]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = array![[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]];
        let b = array![[2.0, 1.0], [-1.0, 4.0], [0.5, -3.0]];
        let mut naive = Array2::<f64>::zeros((2, 2));
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    naive[[i, j]] += a[[i, k]] * b[[k, j]];
                }
            }
        }
        let ps = store();
        let mut g = Graph::new(&ps);
        let (av, bv) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let c = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(c), naive);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let a = g.constant(Array2::zeros((2, 3))).unwrap();
        let b = g.constant(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(g.matmul(a, b), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let l = g.constant(Array2::zeros((2, 1))).unwrap();
        let loss = g.cross_entropy_smoothed(l, &[0], 0.0).unwrap();
        assert_abs_diff_eq!(g.scalar(loss), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_smoothed_matches_formula() {
        // smoothed target (0.95, 0.05) against log-softmax of (2, 0)
        let lse = (2.0f64.exp() + 1.0).ln();
        let expected = -0.95 * (2.0 - lse) - 0.05 * (0.0 - lse);
        let ps = store();
        let mut g = Graph::new(&ps);
        let l = g.constant(array![[2.0], [0.0]]).unwrap();
        let loss = g.cross_entropy_smoothed(l, &[0], 0.1).unwrap();
        assert_abs_diff_eq!(g.scalar(loss), expected, epsilon = 1e-14);
    }

    #[test]
    fn mse_of_perfect_prediction_is_zero() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let p = g.constant(array![[0.7]]).unwrap();
        let loss = g.mse(p, &[0.7]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let x = array![[1.5], [-2.0], [0.25]];
        let ps = store();
        let mut g = Graph::new(&ps);
        let w = g.input(array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = g.matmul(w, xv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected = Array2::<f64>::ones((2, 1)).dot(&x.t());
        assert_eq!(grads.wrt(w).unwrap(), &expected);
        assert!(grads.wrt(xv).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.input(array![[1.0]]).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(KernelError::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.input(Array2::zeros((2, 1))).unwrap();
        assert!(matches!(g.backward(x), Err(KernelError::NotScalar { rows: 2, cols: 1 })));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[f64::MAX]]).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(KernelError::NonFinite { op: "scale" })));
    }

    #[test]
    fn param_gradients_accumulate_across_uses() {
        let mut ps = store();
        let id = ps.add("w", array![[2.0]]).unwrap();
        let mut g = Graph::new(&ps);
        let a = g.param(id);
        let b = g.param(id);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap(), &array![[4.0]]);
    }

    #[test]
    fn attention_ignores_invalid_keys() {
        let ps = store();
        let mut g = Graph::new(&ps);
        let q = g.constant(array![[1.0, 0.5], [0.0, -1.0]]).unwrap();
        let k = g.constant(array![[0.3, 9.0], [0.2, -7.0]]).unwrap();
        let v = g.constant(array![[1.0, 100.0], [2.0, 100.0]]).unwrap();
        let out = g.attention(q, k, v, 1, 2, &[true, false]).unwrap();
        // only the first value column is visible to both queries
        assert_eq!(g.value(out), array![[1.0, 1.0], [2.0, 2.0]]);
    }
}
