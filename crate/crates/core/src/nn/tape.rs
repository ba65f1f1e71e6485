//! Reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] walks the list in reverse and
//! accumulates gradients. Parameter leaves are deduplicated by
//! (store id, offset) so a network applied twice in one loss sums its
//! gradient contributions.

use ndarray::Array2;
use std::collections::HashMap;

use super::NnError;
use crate::params::ParamStore;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    /// Parameter leaf tied back to a ParamStore slice.
    Param,
    MatMul(Var, Var),
    /// (b x m) + broadcast (1 x m)
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Abs(Var),
    SumAll(Var),
    /// (b x m) -> (b x 1)
    SumRows(Var),
    /// log sum_l exp(x_l) over a list of (b x 1) columns -> (b x 1)
    LogSumExpCols(Vec<Var>),
    /// (b x m) ++ (b x n) -> (b x (m+n))
    ConcatCols(Var, Var),
    /// column range [start, end) of a (b x m) matrix
    SliceCols(Var, usize, usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_index: HashMap<(u64, usize), Var>,
    grads: Option<Vec<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_index: HashMap::new(),
            grads: None,
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a[[0, 0]]
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.push(Op::Leaf, a)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Register a parameter matrix living at `offset` in `store`.
    /// Repeated registration of the same slice returns the same node.
    pub fn param_matrix(
        &mut self,
        store: &ParamStore,
        offset: usize,
        rows: usize,
        cols: usize,
    ) -> Var {
        if let Some(&v) = self.param_index.get(&(store.id(), offset)) {
            return v;
        }
        let slice = &store.params()[offset..offset + rows * cols];
        let a = Array2::from_shape_vec((rows, cols), slice.to_vec()).unwrap();
        let v = self.push(Op::Param, a);
        self.param_index.insert((store.id(), offset), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim mismatch");
        let out = va.dot(vb);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let out = va + vr;
        self.push(Op::AddRow(a, row), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| {
            if y < *x {
                *x = y;
            }
        });
        self.push(Op::Min(a, b), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(Op::Abs(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Array2::from_elem((1, 1), s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va
            .sum_axis(ndarray::Axis(1))
            .into_shape_with_order((va.nrows(), 1))
            .unwrap();
        self.push(Op::SumRows(a), out)
    }

    /// Row-wise log(sum_l exp(x_l)) over (b x 1) columns, max-shifted.
    pub fn log_sum_exp_cols(&mut self, cols: Vec<Var>) -> Var {
        assert!(!cols.is_empty());
        let b = self.value(cols[0]).nrows();
        let mut out = Array2::<f64>::zeros((b, 1));
        for i in 0..b {
            let xs: Vec<f64> = cols.iter().map(|&c| self.value(c)[[i, 0]]).collect();
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out[[i, 0]] = if m.is_finite() {
                m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            } else {
                m
            };
        }
        self.push(Op::LogSumExpCols(cols), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols row mismatch");
        let out = ndarray::concatenate(ndarray::Axis(1), &[va.view(), vb.view()]).unwrap();
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start < end && end <= va.ncols(), "slice_cols out of range");
        let out = va.slice(ndarray::s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), out)
    }

    fn accumulate(grads: &mut [Array2<f64>], v: Var, g: &Array2<f64>) {
        grads[v.0] += g;
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::BackwardBeforeForward);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss {
                rows: self.value(loss).nrows(),
                cols: self.value(loss).ncols(),
            });
        }
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[loss.0][[0, 0]] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param { .. } => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::AddRow(a, row) => {
                    let grow = g
                        .sum_axis(ndarray::Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .unwrap();
                    Self::accumulate(&mut grads, *a, &g);
                    Self::accumulate(&mut grads, *row, &grow);
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, &g);
                    Self::accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    Self::accumulate(&mut grads, *a, &g);
                    let gb = g.mapv(|x| -x);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Min(a, b) => {
                    // ties route to the first argument
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for ((x, (&p, &q)), y) in ga
                        .iter_mut()
                        .zip(va.iter().zip(vb.iter()))
                        .zip(gb.iter_mut())
                    {
                        if p <= q {
                            *y = 0.0;
                        } else {
                            *x = 0.0;
                        }
                    }
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Relu(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[i].value;
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|x| x * c);
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => {
                    Self::accumulate(&mut grads, *a, &g);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = &g
                        * &self.nodes[a.0]
                            .value
                            .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Abs(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 });
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), s);
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::SumRows(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for r in 0..dim.0 {
                        let gr = g[[r, 0]];
                        for c in 0..dim.1 {
                            ga[[r, c]] = gr;
                        }
                    }
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.nodes[a.0].value.ncols();
                    let ga = g.slice(ndarray::s![.., ..wa]).to_owned();
                    let gb = g.slice(ndarray::s![.., wa..]).to_owned();
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::SliceCols(a, start, _end) => {
                    let dim = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros(dim);
                    ga.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::LogSumExpCols(cols) => {
                    let lse = &self.nodes[i].value;
                    let cols = cols.clone();
                    for &c in &cols {
                        let vc = &self.nodes[c.0].value;
                        let gc = vc
                            .iter()
                            .zip(lse.iter())
                            .zip(g.iter())
                            .map(|((&x, &l), &gi)| gi * (x - l).exp())
                            .collect::<Vec<_>>();
                        let gc = Array2::from_shape_vec((vc.nrows(), 1), gc).unwrap();
                        Self::accumulate(&mut grads, c, &gc);
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss w.r.t. a node. Valid after `backward`.
    pub fn grad(&self, v: Var) -> Result<&Array2<f64>, NnError> {
        self.grads
            .as_ref()
            .map(|g| &g[v.0])
            .ok_or(NnError::BackwardBeforeForward)
    }

    /// Scatter parameter-leaf gradients back into `store.grad`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<(), NnError> {
        let grads = self
            .grads
            .as_ref()
            .ok_or(NnError::BackwardBeforeForward)?;
        for (&(sid, offset), &var) in &self.param_index {
            if sid != store.id() {
                continue;
            }
            let g = &grads[var.0];
            let dst = store.grad_mut();
            for (k, &gv) in g.iter().enumerate() {
                dst[offset + k] += gv;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
