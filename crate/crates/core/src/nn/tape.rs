//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Tape::backward`] walks
//! the record in reverse and returns the gradient of a scalar with respect to
//! every parameter that took part.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Target index that [`Tape::cross_entropy`] skips (padding).
pub const IGNORE: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Unfold(Var, usize),
    LayerNorm(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Mat),
    SumScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    // `None` for parameters, whose value lives in the store
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("only parameters are stored by reference"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
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

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select(Axis(0), ids);
        self.push(out, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Column-wise maximum over rows (max-pooling over time), `1 x d`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert!(rows > 0, "max over zero rows");
        let mut out = Array2::zeros((1, cols));
        let mut arg = vec![0; cols];
        for j in 0..cols {
            let mut best = x[[0, j]];
            for i in 1..rows {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    arg[j] = i;
                }
            }
            out[[0, j]] = best;
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over zero rows")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one row:
    /// output row `i` is `[a_i, a_{i+1}, ..., a_{i+width-1}]`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Var {
        let x = self.value(a);
        let (rows, d) = x.dim();
        assert!(rows >= width, "unfold width {width} exceeds {rows} rows");
        let mut out = Array2::zeros((rows - width + 1, width * d));
        for i in 0..rows - width + 1 {
            for j in 0..width {
                out.slice_mut(s![i, j * d..(j + 1) * d]).assign(&x.row(i + j));
            }
        }
        self.push(out, Op::Unfold(a, width))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`, as a `1 x 1` value.
    /// Rows whose target is [`IGNORE`] contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target per row");
        let probs = softmax_rows(x);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            total -= log_softmax_at(x.row(i), t);
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        )
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts.iter().map(|&p| self.value(p)[[0, 0]]).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumScalars(parts.to_vec()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the scalar `loss` with respect to every parameter on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out_value = self.nodes[i].value.as_ref();
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, g),
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
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::Sigmoid(a) => {
                    let y = out_value.unwrap();
                    acc(&mut grads, *a, &g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = out_value.unwrap();
                    acc(&mut grads, *a, &g * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, ids) => {
                    let mut ga = Array2::zeros(self.shape(*table));
                    for (k, &id) in ids.iter().enumerate() {
                        let mut row = ga.row_mut(id);
                        row += &g.row(k);
                    }
                    acc(&mut grads, *table, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = out_value.unwrap();
                    let mut ga = Array2::zeros(y.dim());
                    for ((mut out_row, y_row), g_row) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = y_row.dot(&g_row);
                        for ((o, &yv), &gv) in out_row.iter_mut().zip(y_row.iter()).zip(g_row.iter()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (j, &i) in arg.iter().enumerate() {
                        ga[[i, j]] = g[[0, j]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Array2::from_shape_fn((rows, cols), |(_, j)| g[[0, j]] / rows as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::Unfold(a, width) => {
                    let (rows, d) = self.shape(*a);
                    let mut ga = Array2::zeros((rows, d));
                    for k in 0..g.nrows() {
                        for j in 0..*width {
                            let mut row = ga.row_mut(k + j);
                            row += &g.slice(s![k, j * d..(j + 1) * d]);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = out_value.unwrap();
                    let d = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for (r, mut out_row) in ga.rows_mut().into_iter().enumerate() {
                        let g_row = g.row(r);
                        let y_row = y.row(r);
                        let g_mean = g_row.sum() / d;
                        let gy_mean = g_row.dot(&y_row) / d;
                        for ((o, &gv), &yv) in out_row.iter_mut().zip(g_row.iter()).zip(y_row.iter()) {
                            *o = inv_std[r] * (gv - g_mean - yv * gy_mean);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let scale = g[[0, 0]];
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE {
                            ga.row_mut(r).fill(0.0);
                        } else {
                            ga[[r, t]] -= 1.0;
                        }
                    }
                    ga *= scale;
                    acc(&mut grads, *logits, ga);
                }
                Op::SumScalars(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
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

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Group, ParamStore};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the tape for every entry of every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss)
        };
        let eps = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).value.dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.get(id).value[[r, c]];
                    store.get_mut(id).value[[r, c]] = orig + eps;
                    let plus = {
                        let mut t = Tape::new(store);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    store.get_mut(id).value[[r, c]] = orig - eps;
                    let minus = {
                        let mut t = Tape::new(store);
                        let l = f(&mut t);
                        t.scalar(l)
                    };
                    store.get_mut(id).value[[r, c]] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let got = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                    let denom = numeric.abs().max(got.abs()).max(1e-7);
                    assert!(
                        (numeric - got).abs() / denom < 1e-5,
                        "{} [{r},{c}]: analytic {got} numeric {numeric}",
                        store.get(id).name
                    );
                }
            }
        }
    }

    fn random_store(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            store.add_uniform(&format!("p{i}"), (r, c), 1.0, Group::Decoder, &mut rng);
        }
        store
    }

    #[test]
    fn matmul_activations_and_cross_entropy() {
        let mut store = random_store(&[(3, 4), (4, 5), (1, 5)], 1);
        check(&mut store, |t| {
            let ids: Vec<ParamId> = t.params().ids().collect();
            let x = t.param(ids[0]);
            let w = t.param(ids[1]);
            let b = t.param(ids[2]);
            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let a = t.tanh(h);
            let s = t.sigmoid(h);
            let m = t.mul(a, s);
            let m = t.scale(m, 0.7);
            t.cross_entropy(m, &[1, IGNORE, 4])
        });
    }

    #[test]
    fn structural_ops() {
        let mut store = random_store(&[(5, 3), (5, 2), (6, 4)], 2);
        check(&mut store, |t| {
            let ids: Vec<ParamId> = t.params().ids().collect();
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let table = t.param(ids[2]);
            let cat = t.concat_cols(&[a, b]);
            let top = t.slice_rows(cat, 0, 2);
            let bottom = t.slice_rows(cat, 2, 5);
            let stacked = t.concat_rows(&[bottom, top]);
            let cols = t.slice_cols(stacked, 1, 4);
            let emb = t.gather_rows(table, &[0, 3, 3, 5, 1]);
            let emb = t.slice_cols(emb, 0, 3);
            let joined = t.add(cols, emb);
            let tr = t.transpose(joined);
            let sm = t.softmax_rows(tr);
            let ln = t.layer_norm(joined);
            let pooled = t.mean_rows(ln);
            let windows = t.unfold(joined, 2);
            let relu = t.relu(windows);
            let mx = t.max_rows(relu);
            let l1 = t.cross_entropy(sm, &[0, 2, 4]);
            let l2 = t.cross_entropy(pooled, &[1]);
            let l3 = t.cross_entropy(mx, &[5]);
            t.sum_scalars(&[l1, l2, l3])
        });
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let logits = t.input(Array2::zeros((4, 8)));
        let l = t.cross_entropy(logits, &[0, 1, 2, 3]);
        assert!((t.scalar(l) - 4.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let p = softmax_rows(&array![[1000.0, 1000.0, -1000.0]]);
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
        assert_eq!(p[[0, 2]], 0.0);
    }

    #[test]
    fn shared_parameter_gets_summed_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]], Group::Encoder);
        let mut t = Tape::new(&store);
        let w = t.param(id);
        let w2 = t.param(id);
        assert_eq!(w, w2);
        let y = t.mul(w, w2);
        let g = t.backward(y);
        assert_eq!(g.get(id).unwrap()[[0, 0]], 4.0);
    }
}
