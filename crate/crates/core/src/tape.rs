//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients into a [`Gradients`] set keyed by [`ParamId`].
//!
//! Elementwise functions are recorded together with their local derivative
//! (see [`Tape::map`] and [`Tape::map2`]), so special functions and
//! reparameterized samplers plug in without a dedicated backward rule.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Storage class used for memory accounting of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BufferKind {
    Parameter,
    Constant,
    Activation,
    /// K-wide per-row latent buffers (v, π, z, w, f).
    Latent,
    /// D-wide per-row representations (e, g).
    Representation,
    /// Row-by-row interaction buffers such as the score matrix.
    Pairwise,
}

enum Op {
    Leaf,
    Param(ParamId),
    /// Row `i` is the mean of the listed rows of a parameter table.
    EmbedMean {
        param: ParamId,
        rows: Vec<Vec<usize>>,
    },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(n×m) ⊙ (n×1)` broadcast along columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    Map {
        x: Var,
        dx: Matrix,
    },
    Map2 {
        a: Var,
        b: Var,
        da: Matrix,
        db: Matrix,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    CumSumCols(Var),
    RowSum(Var),
    Sum(Var),
    /// Scalar output whose gradient w.r.t. `x` was computed in the forward pass.
    Reduce {
        x: Var,
        dx: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    kind: BufferKind,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss w.r.t. every parameter it touched.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.values.iter().map(|v| Some(Matrix::zeros(v.raw_dim()))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Fails on the first parameter block holding a NaN or infinity.
    pub fn check_finite(&self, params: &ParamStore) -> Result<()> {
        for (id, g) in self.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        Ok(())
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op, kind: BufferKind) -> Var {
        self.nodes.push(Node { value, op, kind });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Re-labels a node for memory accounting.
    pub fn tag(&mut self, v: Var, kind: BufferKind) -> Var {
        self.nodes[v.0].kind = kind;
        v
    }

    /// Bytes held by node values of the given kind.
    pub fn buffer_bytes(&self, kind: BufferKind) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == kind)
            .map(|n| n.value.len() * std::mem::size_of::<f64>())
            .sum()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, BufferKind::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id), BufferKind::Parameter)
    }

    /// Row `i` of the result is the mean of `rows[i]` in parameter table `id`.
    pub fn embed_mean(&mut self, id: ParamId, rows: Vec<Vec<usize>>) -> Var {
        let table = self.params.get(id);
        let mut out = Matrix::zeros((rows.len(), table.ncols()));
        for (i, list) in rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &r in list {
                dst += &table.row(r);
            }
            if !list.is_empty() {
                dst /= list.len() as f64;
            }
        }
        self.push(out, Op::EmbedMean { param: id, rows }, BufferKind::Activation)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), BufferKind::Activation)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), BufferKind::Pairwise)
    }

    /// Adds a `1×m` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row), BufferKind::Activation)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), BufferKind::Activation)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), BufferKind::Activation)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), BufferKind::Activation)
    }

    /// Multiplies each row of `x` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let v = self.value(x) * self.value(col);
        self.push(v, Op::MulCol(x, col), BufferKind::Activation)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c), BufferKind::Activation)
    }

    /// Elementwise `f`, which returns `(value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(src.raw_dim());
        let mut dx = Matrix::zeros(src.raw_dim());
        ndarray::Zip::from(&mut value)
            .and(&mut dx)
            .and(src)
            .for_each(|v, d, &s| {
                let (fv, fd) = f(s);
                *v = fv;
                *d = fd;
            });
        self.push(value, Op::Map { x, dx }, BufferKind::Activation)
    }

    /// Elementwise binary `f(flat_index, a, b) -> (value, ∂a, ∂b)`; the index
    /// lets callers consult row-aligned constants such as noise.
    pub fn map2(&mut self, a: Var, b: Var, f: impl Fn(usize, f64, f64) -> (f64, f64, f64)) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "map2 shape mismatch");
        let n = va.len();
        let mut value = Vec::with_capacity(n);
        let mut da = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        for (i, (&x, &y)) in va.iter().zip(vb.iter()).enumerate() {
            let (v, gx, gy) = f(i, x, y);
            value.push(v);
            da.push(gx);
            db.push(gy);
        }
        let dim = va.raw_dim();
        let shape = (dim[0], dim[1]);
        let value = Matrix::from_shape_vec(shape, value).expect("shape");
        let da = Matrix::from_shape_vec(shape, da).expect("shape");
        let db = Matrix::from_shape_vec(shape, db).expect("shape");
        self.push(value, Op::Map2 { a, b, da, db }, BufferKind::Activation)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start }, BufferKind::Activation)
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.accumulate_axis_inplace(Axis(1), |&prev, cur| *cur += prev);
        self.push(v, Op::CumSumCols(x), BufferKind::Activation)
    }

    /// `n×m → n×1`
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(x), BufferKind::Activation)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x), BufferKind::Activation)
    }

    /// Records a scalar-valued function of `x` whose gradient is already known.
    pub fn reduce(&mut self, x: Var, value: f64, dx: Matrix) -> Var {
        assert_eq!(dx.dim(), self.value(x).dim(), "reduce gradient shape");
        self.push(Matrix::from_elem((1, 1), value), Op::Reduce { x, dx }, BufferKind::Activation)
    }

    // Convenience compositions.

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let t = v.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let s = crate::distributions::sigmoid(v);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, |v| (v.ln(), 1.0 / v))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, |v| {
            (
                crate::distributions::softplus(v),
                crate::distributions::sigmoid(v),
            )
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    /// Unit-normalizes each row; fails on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let sq = self.map(x, |v| (v * v, 2.0 * v));
        let norm2 = self.row_sum(sq);
        if self.value(norm2).iter().any(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::DegenerateRepresentation);
        }
        let inv = self.map(norm2, |n| {
            let r = n.sqrt();
            (1.0 / r, -0.5 / (n * r))
        });
        Ok(self.mul_col(x, inv))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients {
            grads: (0..self.params.len()).map(|_| None).collect(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate_param(&mut out, self.params, *id, |acc| *acc += &g),
                Op::EmbedMean { param, rows } => {
                    accumulate_param(&mut out, self.params, *param, |acc| {
                        for (i, list) in rows.iter().enumerate() {
                            if list.is_empty() {
                                continue;
                            }
                            let scaled = &g.row(i) / list.len() as f64;
                            for &r in list {
                                let mut dst = acc.row_mut(r);
                                dst += &scaled;
                            }
                        }
                    })
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads, *row, gr);
                    add_grad(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *b, -&g);
                    add_grad(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::MulCol(x, col) => {
                    let gx = &g * self.value(*col);
                    let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_grad(&mut grads, *x, gx);
                    add_grad(&mut grads, *col, gc);
                }
                Op::Scale(x, c) => add_grad(&mut grads, *x, g * *c),
                Op::Map { x, dx } => add_grad(&mut grads, *x, g * dx),
                Op::Map2 { a, b, da, db } => {
                    add_grad(&mut grads, *a, &g * da);
                    add_grad(&mut grads, *b, g * db);
                }
                Op::SliceCols { x, start } => {
                    let mut full = Matrix::zeros(self.value(*x).raw_dim());
                    let end = start + g.ncols();
                    full.slice_mut(s![.., *start..end]).assign(&g);
                    add_grad(&mut grads, *x, full);
                }
                Op::CumSumCols(x) => {
                    // reverse cumulative sum
                    let mut gx = g;
                    let n = gx.ncols();
                    for mut row in gx.rows_mut() {
                        for j in (0..n.saturating_sub(1)).rev() {
                            row[j] += row[j + 1];
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::RowSum(x) => {
                    let gx = Matrix::from_shape_fn(self.value(*x).dim(), |(i, _)| g[[i, 0]]);
                    add_grad(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Matrix::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    add_grad(&mut grads, *x, gx);
                }
                Op::Reduce { x, dx } => add_grad(&mut grads, *x, dx * g[[0, 0]]),
            }
        }
        out
    }
}

fn add_grad(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_param(
    out: &mut Gradients,
    params: &ParamStore,
    id: ParamId,
    f: impl FnOnce(&mut Matrix),
) {
    let slot = &mut out.grads[id.0];
    let acc = slot.get_or_insert_with(|| Matrix::zeros(params.get(id).raw_dim()));
    f(acc);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: &[(&str, Matrix)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(*n, v.clone());
        }
        s
    }

    #[test]
    fn square_at_three() {
        let store = store_with(&[("x", array![[3.0]])]);
        let mut t = Tape::new(&store);
        let x = t.param(ParamId(0));
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(g.get(ParamId(0)).unwrap()[[0, 0]], 6.0);
    }

    // numerical gradient of a scalar function of the store
    fn finite_diff(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64) -> Vec<Matrix> {
        let mut out = Vec::new();
        for id in store.ids() {
            let mut gm = Matrix::zeros(store.get(id).raw_dim());
            for idx in 0..gm.len() {
                let (r, c) = (idx / gm.ncols(), idx % gm.ncols());
                let mut plus = store.clone();
                plus.get_mut(id)[[r, c]] += 1e-6;
                let mut minus = store.clone();
                minus.get_mut(id)[[r, c]] -= 1e-6;
                gm[[r, c]] = (f(&plus) - f(&minus)) / 2e-6;
            }
            out.push(gm);
        }
        out
    }

    #[test]
    fn composite_graph_matches_finite_difference() {
        let store = store_with(&[
            ("emb", array![[0.3, -0.2], [0.5, 0.9], [-0.4, 0.1]]),
            ("w", array![[0.7, -0.3, 0.2], [0.1, 0.4, -0.6]]),
            ("b", array![[0.05, -0.1, 0.2]]),
            ("other", array![[0.2, 0.1], [0.6, -0.2]]),
        ]);
        let forward = |s: &ParamStore| -> (f64, Gradients) {
            let mut t = Tape::new(s);
            let e = t.embed_mean(ParamId(0), vec![vec![0, 2], vec![1], vec![2, 2, 0]]);
            let w = t.param(ParamId(1));
            let b = t.param(ParamId(2));
            let h = t.matmul(e, w);
            let h = t.add_row(h, b);
            let h = t.tanh(h);
            let sp = t.softplus(h);
            let cs = t.cumsum_cols(sp);
            let sl = t.slice_cols(cs, 1, 3);
            let o = t.param(ParamId(3));
            let nrm = t.normalize_rows(o).unwrap();
            let pair = t.matmul_t(sl, nrm);
            let sig = t.sigmoid(pair);
            let m2 = t.map2(sig, pair, |_, a, b| (a * b, b, a));
            let rs = t.row_sum(m2);
            let ex = t.exp(rs);
            let lg = t.ln(ex);
            let sc = t.scale(lg, 0.7);
            let total = t.sum(sc);
            let sq = t.mul(total, total);
            (t.scalar(sq), t.backward(sq))
        };
        let (_, g) = forward(&store);
        let fd = finite_diff(&store, &|s| forward(s).0);
        for id in store.ids() {
            let a = g.get(id).unwrap();
            for (x, y) in a.iter().zip(fd[id.0].iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{}: {x} vs {y}", store.name(id));
            }
        }
    }

    #[test]
    fn reduce_scales_by_upstream() {
        let store = store_with(&[("x", array![[1.0, 2.0]])]);
        let mut t = Tape::new(&store);
        let x = t.param(ParamId(0));
        let r = t.reduce(x, 5.0, array![[0.5, -1.0]]);
        let r3 = t.scale(r, 3.0);
        let g = t.backward(r3);
        assert_eq!(g.get(ParamId(0)).unwrap(), &array![[1.5, -3.0]]);
    }

    #[test]
    fn zero_row_normalization_is_an_error() {
        let store = store_with(&[("x", array![[0.0, 0.0], [1.0, 0.0]])]);
        let mut t = Tape::new(&store);
        let x = t.param(ParamId(0));
        assert!(matches!(t.normalize_rows(x), Err(Error::DegenerateRepresentation)));
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let store = store_with(&[("good", array![[1.0]]), ("bad", array![[0.0]])]);
        let mut t = Tape::new(&store);
        let a = t.param(ParamId(0));
        let b = t.param(ParamId(1));
        let l = t.ln(b);
        let s = t.add(a, l);
        let g = t.backward(s);
        match g.check_finite(&store) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn buffer_accounting_by_kind() {
        let store = store_with(&[("x", Matrix::zeros((4, 3)))]);
        let mut t = Tape::new(&store);
        let x = t.param(ParamId(0));
        let y = t.scale(x, 2.0);
        t.tag(y, BufferKind::Latent);
        assert_eq!(t.buffer_bytes(BufferKind::Latent), 4 * 3 * 8);
        assert_eq!(t.buffer_bytes(BufferKind::Parameter), 4 * 3 * 8);
    }
}
