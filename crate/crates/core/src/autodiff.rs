//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Every tensor in the model stack is a 2-D `f64` matrix, so the tape only
//! has to support `Array2`. A forward pass appends nodes to a [`Tape`];
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into the parameter leaves it finds. Scalars are `[1 x 1]` matrices.
//!
//! The op set is deliberately small: enough for GRU cells, additive
//! attention, feed-forward heads, masking with a straight-through
//! binarization, and the loss terms built on top of them.

use ndarray::{concatenate, s, Array2, Axis};
use std::collections::HashMap;
use std::rc::Rc;

/// Identifies the owner of a parameter tensor. Training updates exactly one
/// group per epoch, so gradients are collected per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    /// Feature-selection parameters (mask model + reconstruction model).
    Theta,
    /// Environment-agnostic prediction module.
    PhiInv,
    /// Environment-aware prediction module.
    PhiEnv,
}

/// Index of a parameter tensor within its group's [`crate::model::ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub group: GroupId,
    pub index: usize,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; gradients flowing into it are dropped.
    Leaf,
    /// Trainable leaf; gradients are reported under its [`ParamRef`].
    Param(ParamRef),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[m x n] + [1 x n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m x n] * [m x 1]` broadcast over columns.
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Ln(Var),
    Square(Var),
    /// Row-wise softmax (each row sums to one).
    SoftmaxRows(Var),
    /// Softmax down a `[m x 1]` column.
    SoftmaxCol(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Rc<Vec<Var>>),
    /// Column `j` of a matrix, as `[m x 1]`.
    Col(Var, usize),
    /// Select rows by index (duplicates allowed); backward scatter-adds.
    GatherRows(Var, Rc<Vec<usize>>),
    /// Repeat a `[1 x n]` row; backward sums over rows.
    RepeatRow(Var),
    /// Forward `1[x > 0.5]`; backward passes the gradient through unchanged.
    BinarizeSt(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients keyed by parameter reference, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamRef, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, p: ParamRef) -> Option<&Array2<f64>> {
        self.grads.get(&p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamRef, &Array2<f64>)> {
        self.grads.iter()
    }

    pub fn group_iter(&self, group: GroupId) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.grads
            .iter()
            .filter(move |(p, _)| p.group == group)
            .map(|(p, g)| (p.index, g))
    }
}

/// A define-by-run computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    /// One leaf per parameter per graph; repeated use accumulates gradients.
    param_cache: HashMap<ParamRef, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node (forward result).
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Register a parameter leaf. Calling twice with the same reference
    /// returns the same node so gradient contributions accumulate.
    pub fn param(&mut self, p: ParamRef, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.param_cache.get(&p) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(p));
        self.param_cache.insert(p, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.nodes[col.0].value.ncols(), 1);
        let v = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(v, Op::MulCol(a, col))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn softmax_col(&mut self, a: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.ncols(), 1);
        let x = &self.nodes[a.0].value;
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut v = x.mapv(|x| (x - max).exp());
        let sum = v.sum();
        v.mapv_inplace(|x| x / sum);
        self.push(v, Op::SoftmaxCol(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(Rc::new(parts.to_vec())))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![.., j..j + 1])
            .to_owned();
        self.push(v, Op::Col(a, j))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn repeat_row(&mut self, a: Var, m: usize) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.nrows(), 1);
        let row = self.nodes[a.0].value.row(0).to_owned();
        let v = Array2::from_shape_fn((m, row.len()), |(_, j)| row[j]);
        self.push(v, Op::RepeatRow(a))
    }

    /// Hard threshold at 0.5 with a pass-through gradient. The input is
    /// expected to already be a sigmoid output, so the backward rule is the
    /// identity on that sigmoid, which keeps the surrogate gradient bounded.
    pub fn binarize_st(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.5 { 1.0 } else { 0.0 });
        self.push(v, Op::BinarizeSt(a))
    }

    /// Reverse pass from a scalar node. Returns parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the node being visited vs. parent gradient slots.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(p) => {
                    match out.grads.entry(p) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            *e.get_mut() += &g;
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                    };
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let da = &g / bv;
                    let db = -&g * &self.nodes[a.0].value / (bv * bv);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Neg(a) => {
                    accumulate(&mut grads, a.0, g.mapv(|x| -x));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a.0, g.mapv(|x| c * x));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, a.0, g);
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, row.0, drow);
                }
                Op::MulCol(a, col) => {
                    let da = &g * &self.nodes[col.0].value;
                    let dcol = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, col.0, dcol);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a.0, &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a.0, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads, a.0, &g * &x.mapv(sigmoid));
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a.0].value;
                    let da = &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                    accumulate(&mut grads, a.0, da);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads, a.0, &g / x);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads, a.0, &g * &x.mapv(|v| 2.0 * v));
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let gy = &g * y;
                    let row_dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = &gy - &(y * &row_dot);
                    accumulate(&mut grads, a.0, da);
                }
                Op::SoftmaxCol(a) => {
                    // da = y ⊙ (g − <g, y>)
                    let y = &self.nodes[i].value;
                    let dot = (&g * y).sum();
                    let da = y * &g.mapv(|v| v - dot);
                    accumulate(&mut grads, a.0, da);
                }
                Op::SumAll(a) => {
                    let gv = g[(0, 0)];
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), gv);
                    accumulate(&mut grads, a.0, da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let gv = g[(0, 0)] / n;
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), gv);
                    accumulate(&mut grads, a.0, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts.iter() {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p.0, dp);
                        offset += w;
                    }
                }
                Op::Col(a, j) => {
                    let dim = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros(dim);
                    da.column_mut(j).assign(&g.column(0));
                    accumulate(&mut grads, a.0, da);
                }
                Op::GatherRows(a, idx) => {
                    let dim = self.nodes[a.0].value.dim();
                    let mut da = Array2::zeros(dim);
                    for (k, &src) in idx.iter().enumerate() {
                        let mut row = da.row_mut(src);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::RepeatRow(a) => {
                    let da = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, a.0, da);
                }
                Op::BinarizeSt(a) => {
                    accumulate(&mut grads, a.0, g);
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
    match &mut grads[i] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x0`, one entry at a time.
    fn finite_diff<F: FnMut(&Array2<f64>) -> f64>(
        x0: &Array2<f64>,
        mut f: F,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[(r, c)] += h;
            let mut xm = x0.clone();
            xm[(r, c)] -= h;
            g[(r, c)] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() <= tol * scale,
                "mismatch: {x} vs {y} (tol {tol})"
            );
        }
    }

    const P: ParamRef = ParamRef {
        group: GroupId::Theta,
        index: 0,
    };

    /// Gradient-check a single-parameter scalar function built on the tape.
    fn check_grad<F>(x0: Array2<f64>, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param(P, &x0);
        let loss = build(&mut tape, x);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let grads = tape.backward(loss);
        let analytic = grads.get(P).expect("param gradient missing").clone();

        let fd = finite_diff(
            &x0,
            |xv| {
                let mut t = Tape::new();
                let x = t.param(P, xv);
                let l = build(&mut t, x);
                t.scalar(l)
            },
            1e-5,
        );
        assert_close(&analytic, &fd, 1e-6);
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b0 = rand_mat(&mut rng, 4, 3);
        let x0 = rand_mat(&mut rng, 2, 4);
        check_grad(x0, |t, x| {
            let b = t.constant(b0.clone());
            let y = t.matmul(x, b);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let other = rand_mat(&mut rng, 3, 3).mapv(|x| x + 2.5); // keep away from 0 for div
        let x0 = rand_mat(&mut rng, 3, 3);

        check_grad(x0.clone(), |t, x| {
            let y = t.sigmoid(x);
            t.sum_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let y = t.tanh(x);
            t.sum_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let y = t.softplus(x);
            t.sum_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let y = t.leaky_relu(x, 0.01);
            t.sum_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let y = t.square(x);
            t.mean_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let o = t.constant(other.clone());
            let y = t.div(x, o);
            let z = t.mul(y, o);
            t.sum_all(z)
        });
        check_grad(x0.mapv(|v| v + 3.0), |t, x| {
            let y = t.ln(x);
            t.sum_all(y)
        });
        check_grad(x0.clone(), |t, x| {
            let y = t.neg(x);
            let z = t.scale(y, 1.7);
            let w = t.add_scalar(z, 0.3);
            t.sum_all(w)
        });
    }

    #[test]
    fn broadcast_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = rand_mat(&mut rng, 4, 3);
        let row0 = rand_mat(&mut rng, 1, 3);
        let col0 = rand_mat(&mut rng, 4, 1);

        // gradient w.r.t. the row operand
        check_grad(row0, |t, x| {
            let a = t.constant(m.clone());
            let y = t.add_row(a, x);
            let sq = t.square(y);
            t.sum_all(sq)
        });
        // gradient w.r.t. the column operand
        check_grad(col0, |t, x| {
            let a = t.constant(m.clone());
            let y = t.mul_col(a, x);
            let sq = t.square(y);
            t.sum_all(sq)
        });
        // repeat_row
        check_grad(rand_mat(&mut rng, 1, 5), |t, x| {
            let y = t.repeat_row(x, 4);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_mat(&mut rng, 3, 4);
        check_grad(rand_mat(&mut rng, 3, 4), |t, x| {
            let s = t.softmax_rows(x);
            let c = t.constant(w.clone());
            let y = t.mul(s, c);
            t.sum_all(y)
        });
        let wc = rand_mat(&mut rng, 5, 1);
        check_grad(rand_mat(&mut rng, 5, 1), |t, x| {
            let s = t.softmax_col(x);
            let c = t.constant(wc.clone());
            let y = t.mul(s, c);
            t.sum_all(y)
        });
    }

    #[test]
    fn structural_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_mat(&mut rng, 4, 3);
        let idx = Rc::new(vec![0usize, 2, 2, 3, 1]);

        check_grad(x0.clone(), |t, x| {
            let y = t.transpose(x);
            let sq = t.square(y);
            t.sum_all(sq)
        });
        check_grad(x0.clone(), |t, x| {
            let g = t.gather_rows(x, idx.clone());
            let sq = t.square(g);
            t.sum_all(sq)
        });
        check_grad(x0.clone(), |t, x| {
            let c = t.col(x, 1);
            let sq = t.square(c);
            t.sum_all(sq)
        });
        check_grad(x0.clone(), |t, x| {
            let a = t.col(x, 0);
            let b = t.col(x, 2);
            let cat = t.concat_cols(&[a, b, x]);
            let sq = t.square(cat);
            t.sum_all(sq)
        });
    }

    #[test]
    fn param_reuse_accumulates_gradient() {
        // loss = sum(x) + sum(x^2) built with two uses of the same param
        let x0 = array![[1.0, 2.0], [3.0, -1.0]];
        let mut tape = Tape::new();
        let a = tape.param(P, &x0);
        let b = tape.param(P, &x0);
        assert_eq!(a, b);
        let sq = tape.square(b);
        let s1 = tape.sum_all(a);
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2);
        let grads = tape.backward(loss);
        let g = grads.get(P).unwrap();
        let expected = x0.mapv(|v| 1.0 + 2.0 * v);
        assert_close(g, &expected, 1e-12);
    }

    #[test]
    fn binarize_st_forward_thresholds_and_backward_is_identity() {
        let x0 = array![[0.2, 0.7], [0.5, 0.9]];
        let mut tape = Tape::new();
        let x = tape.param(P, &x0);
        let m = tape.binarize_st(x);
        assert_eq!(tape.value(m), &array![[0.0, 1.0], [0.0, 1.0]]);
        let w = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = tape.mul(m, w);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        // identity backward: gradient equals the downstream weights
        assert_close(grads.get(P).unwrap(), &array![[1.0, 2.0], [3.0, 4.0]], 1e-12);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-10);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        assert!(softplus(-50.0) > 0.0 && softplus(-50.0) < 1e-20);
    }
}
