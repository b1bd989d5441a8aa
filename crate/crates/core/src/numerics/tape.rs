//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! Every value is a 2-D `f64` matrix; rows are batch items. A node's index
//! is its position in the tape, so visiting nodes in reverse creation order
//! is a valid reverse topological order.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use super::{all_finite, sigmoid, zip_map, DenseMatrix};
use crate::error::{Error, Result};
use crate::sparse::SparsePatternMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<'a> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀb` with `b` a single row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    /// Σ (a − b)²
    SquaredError(Var, Var),
    /// `y[b, i] = Σ_p w[p] · adj[p] · x[b, col(p)]` over row `i` of `adj`.
    SparseConv {
        adjacency: &'a SparsePatternMatrix,
        weights: Var,
        x: Var,
    },
    /// Per-node linear map of stacked feature columns:
    /// `y[b, i·C + o] = Σ_c cols[c][b, i] · gamma[c, o] + bias[o]`.
    DimReduce {
        cols: Vec<Var>,
        gamma: Var,
        bias: Var,
    },
}

struct Node<'a> {
    value: DenseMatrix,
    op: Op<'a>,
}

/// Gradients of a scalar with respect to every parameter leaf that
/// contributed to it, keyed by parameter index.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, index: usize) -> Option<&DenseMatrix> {
        self.by_param.get(&index)
    }

    /// Gradient for `index`, or zeros shaped like `like` if it had none.
    pub fn get_or_zeros(&self, index: usize, like: &DenseMatrix) -> DenseMatrix {
        self.by_param
            .get(&index)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(like.dim()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DenseMatrix)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape_err(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.dim(),
        right: b.dim(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported under `index`.
    pub fn param(&mut self, index: usize, value: &DenseMatrix) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("add", av, bv));
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape_err("add_row", av, rv));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("sub", av, bv));
        }
        let out = av - bv;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("mul", av, bv));
        }
        let out = av * bv;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("squared_error", av, bv));
        }
        let s: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Array2::from_elem((1, 1), s), Op::SquaredError(a, b)))
    }

    /// `(W ⊙ Ã) xᵀ` for every batch row of `x`, where `weights` holds one value
    /// per stored entry of `adjacency`.
    pub fn sparse_conv(
        &mut self,
        adjacency: &'a SparsePatternMatrix,
        weights: Var,
        x: Var,
    ) -> Result<Var> {
        let (wv, xv) = (self.value(weights), self.value(x));
        if wv.len() != adjacency.nnz() {
            return Err(Error::ShapeMismatch {
                op: "sparse_conv weights",
                left: wv.dim(),
                right: (1, adjacency.nnz()),
            });
        }
        if xv.ncols() != adjacency.cols() {
            return Err(Error::ShapeMismatch {
                op: "sparse_conv input",
                left: adjacency.shape(),
                right: xv.dim(),
            });
        }
        let w = wv.as_slice().expect("parameter rows are contiguous");
        let a = adjacency.values();
        let cols = adjacency.col_indices();
        let batch = xv.nrows();
        let mut out = Array2::zeros((batch, adjacency.rows()));
        for b in 0..batch {
            let xrow = xv.row(b);
            for i in 0..adjacency.rows() {
                let mut acc = 0.0;
                for p in adjacency.row_range(i) {
                    acc += w[p] * a[p] * xrow[cols[p]];
                }
                out[[b, i]] = acc;
            }
        }
        Ok(self.push(
            out,
            Op::SparseConv {
                adjacency,
                weights,
                x,
            },
        ))
    }

    pub fn dim_reduce(&mut self, cols: &[Var], gamma: Var, bias: Var) -> Result<Var> {
        let gv = self.value(gamma);
        let bv = self.value(bias);
        let (n_in, c_out) = gv.dim();
        if cols.len() != n_in {
            return Err(Error::ShapeMismatch {
                op: "dim_reduce",
                left: (cols.len(), 0),
                right: gv.dim(),
            });
        }
        if bv.dim() != (1, c_out) {
            return Err(shape_err("dim_reduce bias", gv, bv));
        }
        let Some(first) = cols.first() else {
            return Err(Error::invalid("dim_reduce needs at least one column"));
        };
        let (batch, n) = self.value(*first).dim();
        for c in cols {
            if self.value(*c).dim() != (batch, n) {
                return Err(shape_err("dim_reduce column", self.value(*first), self.value(*c)));
            }
        }
        let mut out = Array2::zeros((batch, n * c_out));
        for b in 0..batch {
            for i in 0..n {
                for o in 0..c_out {
                    let mut acc = bv[[0, o]];
                    for (c, col) in cols.iter().enumerate() {
                        acc += self.nodes[col.0].value[[b, i]] * gv[[c, o]];
                    }
                    out[[b, i * c_out + o]] = acc;
                }
            }
        }
        Ok(self.push(
            out,
            Op::DimReduce {
                cols: cols.to_vec(),
                gamma,
                bias,
            },
        ))
    }

    /// Fails with a diagnostic naming `context` if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, context: impl FnOnce() -> String) -> Result<()> {
        if all_finite(self.value(v)) {
            Ok(())
        } else {
            Err(Error::NonFinite(context()))
        }
    }

    /// Gradients of the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::invalid("backward requires a scalar (1x1) loss"));
        }
        let mut grads: Vec<Option<DenseMatrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => match out.by_param.get_mut(p) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.by_param.insert(*p, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    let d = Array2::from_elem(self.value(*a).dim(), s);
                    acc(&mut grads, *a, d);
                }
                Op::SquaredError(a, b) => {
                    let s = g[[0, 0]];
                    let d = zip_map(self.value(*a), self.value(*b), |x, y| 2.0 * s * (x - y));
                    acc(&mut grads, *b, -&d);
                    acc(&mut grads, *a, d);
                }
                Op::SparseConv {
                    adjacency,
                    weights,
                    x,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*weights);
                    let w = wv.as_slice().expect("contiguous");
                    let a = adjacency.values();
                    let cols = adjacency.col_indices();
                    let mut gw = Array2::zeros(wv.dim());
                    let mut gx = Array2::zeros(xv.dim());
                    {
                        let gw_s = gw.as_slice_mut().expect("fresh array");
                        for b in 0..xv.nrows() {
                            for i in 0..adjacency.rows() {
                                let gi = g[[b, i]];
                                if gi == 0.0 {
                                    continue;
                                }
                                for p in adjacency.row_range(i) {
                                    let j = cols[p];
                                    gw_s[p] += gi * a[p] * xv[[b, j]];
                                    gx[[b, j]] += gi * a[p] * w[p];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *x, gx);
                }
                Op::DimReduce { cols, gamma, bias } => {
                    let gv = self.value(*gamma);
                    let (n_in, c_out) = gv.dim();
                    let (batch, n) = self.value(cols[0]).dim();
                    let mut ggamma = Array2::zeros((n_in, c_out));
                    let mut gbias = Array2::zeros((1, c_out));
                    let mut gcols: Vec<DenseMatrix> =
                        (0..n_in).map(|_| Array2::zeros((batch, n))).collect();
                    for b in 0..batch {
                        for i in 0..n {
                            let gslice = g.slice(s![b, i * c_out..(i + 1) * c_out]);
                            for o in 0..c_out {
                                gbias[[0, o]] += gslice[o];
                            }
                            for (c, col) in cols.iter().enumerate() {
                                let xv = self.nodes[col.0].value[[b, i]];
                                let mut gx = 0.0;
                                for o in 0..c_out {
                                    ggamma[[c, o]] += gslice[o] * xv;
                                    gx += gslice[o] * gv[[c, o]];
                                }
                                gcols[c][[b, i]] = gx;
                            }
                        }
                    }
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *bias, gbias);
                    for (col, gc) in cols.iter().zip(gcols) {
                        acc(&mut grads, *col, gc);
                    }
                }
            }
        }
        for (p, g) in out.iter() {
            if !all_finite(g) {
                return Err(Error::NonFinite(format!("gradient of parameter {p}")));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let x = array![[1.0, 2.0]];
        let mut t = Tape::new();
        let v = t.param(0, &x);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        assert_eq!(t.scalar(loss), 2.5);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap(), &x);
    }

    #[test]
    fn reused_param_accumulates() {
        let x = array![[3.0]];
        let mut t = Tape::new();
        let a = t.param(0, &x);
        let b = t.param(0, &x);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        assert_eq!(t.backward(loss).unwrap().get(0).unwrap(), &array![[2.0]]);
    }

    #[test]
    fn constant_loss_has_no_param_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[4.0]]);
        let p = t.param(0, &array![[1.0]]);
        let z = t.scale(p, 0.0);
        let l = t.add(c, z).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(0).unwrap(), &array![[0.0]]);
    }

    #[test]
    fn sparse_conv_matches_dense() {
        let adj =
            SparsePatternMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 0.5), (1, 1, 1.0)])
                .unwrap();
        let mut t = Tape::new();
        let w = t.param(0, &array![[2.0, 2.0, 1.0]]);
        let x = t.constant(array![[3.0, 5.0]]);
        let y = t.sparse_conv(&adj, w, x).unwrap();
        assert_eq!(t.value(y), &array![[2.0 * 3.0 + 2.0 * 0.5 * 5.0, 5.0]]);
    }

    #[test]
    fn shape_errors_propagate() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 1)));
        assert!(matches!(t.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.add(a, b).is_err());
        let l = t.sum(a);
        let _ = t.backward(l).unwrap();
        assert!(t.backward(a).is_err());
    }
}
