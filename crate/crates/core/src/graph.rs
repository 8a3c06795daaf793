//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients back to its inputs. Vectors are
//! `1 × n` matrices and scalars are `1 × 1`. Nodes only carry gradients when
//! some trainable parameter sits upstream of them, so frozen sub-networks
//! cost nothing on the backward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients of a scalar with respect to parameters, keyed by parameter index.
pub type ParamGrads<T> = BTreeMap<usize, Array2<T>>;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    PickCols {
        x: Var,
        cols: Vec<usize>,
    },
    ClampLn {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Concat(Vec<Var>),
    Rows {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Arc<Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Array2<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Array2<T>>) -> Var {
        self.push_shared(value, Op::Constant, false)
    }

    /// Leaf for parameter `index`; gradients reach it only when `trainable`.
    pub fn param(&mut self, index: usize, value: Array2<T>, trainable: bool) -> Var {
        self.push(value, Op::Param(index), trainable)
    }

    pub fn param_shared(&mut self, index: usize, value: Arc<Array2<T>>, trainable: bool) -> Var {
        self.push_shared(value, Op::Param(index), trainable)
    }

    /// Shared handle to a node's value, for reuse across graphs.
    pub fn shared_value(&self, v: Var) -> Arc<Array2<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        let ng = self.ng(&[x, b]);
        self.push(value, Op::AddRow(x, b), ng)
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).mapv(|e| e * scale + shift);
        let ng = self.ng(&[x]);
        self.push(value, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|e| e.max(T::zero()));
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = T::from_usize(cols).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = Array2::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            rstd.push(inv);
            Zip::from(xhat.row_mut(r)).and(row).for_each(|h, &e| *h = (e - mean) * inv);
        }
        let value = &(&xhat * self.value(gain)) + self.value(bias);
        let ng = self.ng(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq × d`, `k` and `v` are `Tk × d`, and `allowed` (when given)
    /// is `Tq × Tk` with `true` where attention is permitted. Disallowed
    /// positions receive exactly zero weight. Every row must allow at least
    /// one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Option<&Array2<bool>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        let tk = kv.nrows();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Array2::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            if let Some(mask) = allowed {
                debug_assert_eq!(mask.dim(), (tq, tk));
                Zip::from(&mut scores).and(mask).for_each(|s, &ok| {
                    if !ok {
                        *s = T::neg_infinity();
                    }
                });
            }
            softmax_rows_in_place(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Per-head attention weights of an attention node.
    pub fn attention_probs(&self, v: Var) -> &[Array2<T>] {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => probs,
            _ => panic!("node is not an attention node"),
        }
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).to_owned();
        softmax_rows_in_place(&mut value);
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).to_owned();
        for mut row in value.outer_iter_mut() {
            let max = row.fold(T::neg_infinity(), |m, &e| m.max(e));
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<T>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::LogSoftmax(x), ng)
    }

    /// `out[i, 0] = x[i, cols[i]]`
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), cols.len(), "one column per row");
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| xv[[i, cols[i]]]);
        let ng = self.ng(&[x]);
        self.push(value, Op::PickCols { x, cols: cols.to_vec() }, ng)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient vanishes where the clamp is active.
    pub fn clamp_ln(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).mapv(|e| e.max(lo).min(hi).ln());
        let ng = self.ng(&[x]);
        self.push(value, Op::ClampLn { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(x), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = self.ng(parts);
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        let ng = self.ng(&[x]);
        self.push(value, Op::Rows { x, rows: rows.to_vec() }, ng)
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every trainable
    /// parameter leaf upstream of it.
    pub fn backward(&self, loss: Var) -> ParamGrads<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut out = ParamGrads::new();
        if !self.needs_grad(loss) {
            return out;
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => {
                    accumulate_owned(&mut out, *index, g);
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.dot(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = g.t().dot(self.value(*a));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(*b) {
                        self.acc(&mut grads, *b, g.mapv(|e| -e));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.needs_grad(*b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *b, gb);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::Affine(x, scale) => {
                    let scale = *scale;
                    self.acc(&mut grads, *x, g.mapv(|e| e * scale));
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&*node.value).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    if self.needs_grad(*gain) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *gain, gg);
                    }
                    if self.needs_grad(*bias) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *bias, gb);
                    }
                    if self.needs_grad(*x) {
                        let dxhat = &g * self.value(*gain);
                        let n = T::from_usize(dxhat.ncols()).unwrap();
                        let mut gx = Array2::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let d = dxhat.row(r);
                            let h = xhat.row(r);
                            let mean_d = d.sum() / n;
                            let mean_dh = d.dot(&h) / n;
                            let inv = rstd[r];
                            Zip::from(gx.row_mut(r)).and(&d).and(&h).for_each(|o, &dv, &hv| {
                                *o = inv * (dv - mean_d - hv * mean_dh);
                            });
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Array2::zeros(tv.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    self.acc(&mut grads, *table, gt);
                }
                Op::Softmax(x) => {
                    let y = &*node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = g.row(r).dot(&y.row(r));
                        Zip::from(gx.row_mut(r)).and(g.row(r)).and(y.row(r)).for_each(
                            |o, &gv, &yv| *o = yv * (gv - dot),
                        );
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &*node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let total = g.row(r).sum();
                        Zip::from(gx.row_mut(r)).and(g.row(r)).and(y.row(r)).for_each(
                            |o, &gv, &yv| *o = gv - yv.exp() * total,
                        );
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::PickCols { x, cols } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (r, &c) in cols.iter().enumerate() {
                        gx[[r, c]] += g[[r, 0]];
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::ClampLn { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|d, &xv| {
                        if xv < lo || xv > hi {
                            *d = T::zero();
                        } else {
                            *d = *d / xv;
                        }
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        if self.needs_grad(*p) {
                            let gp = g.slice(s![.., offset..offset + width]).to_owned();
                            self.acc(&mut grads, *p, gp);
                        }
                        offset += width;
                    }
                }
                Op::Rows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Array2<T>>],
        g: &Array2<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Array2<T>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq = Array2::zeros(qv.dim());
        let mut gk = Array2::zeros(kv.dim());
        let mut gv = Array2::zeros(vv.dim());
        for (h, p) in probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let go = g.slice(cols);
            gv.slice_mut(cols).assign(&p.t().dot(&go));
            let gp = go.dot(&vv.slice(cols).t());
            let mut gs = Array2::zeros(p.dim());
            for r in 0..p.nrows() {
                let dot = gp.row(r).dot(&p.row(r));
                Zip::from(gs.row_mut(r)).and(gp.row(r)).and(p.row(r)).for_each(
                    |o, &gpv, &pv| *o = pv * (gpv - dot) * scale,
                );
            }
            gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
            gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn accumulate_owned<T: Scalar>(out: &mut ParamGrads<T>, index: usize, g: Array2<T>) {
    match out.get_mut(&index) {
        Some(existing) => *existing += &g,
        None => {
            out.insert(index, g);
        }
    }
}

/// Numerically stable row softmax; `-inf` entries map to exactly zero.
pub fn softmax_rows_in_place<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &e| m.max(e));
        row.mapv_inplace(|e| (e - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check<F>(shape: (usize, usize), seed: u64, f: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let x = g.param(0, x0.clone(), true);
        let loss = f(&mut g, x);
        let grads = g.backward(loss);
        let analytic = &grads[&0];
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / shape.1, idx % shape.1);
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.param(0, xp, true);
                let l = f(&mut g, x);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs().max(a.abs()),
                "entry ({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn softmax_masks_to_exact_zero() {
        let mut x = array![[1.0f64, f64::NEG_INFINITY, 2.0]];
        softmax_rows_in_place(&mut x);
        assert_eq!(x[[0, 1]], 0.0);
        assert!((x.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        fd_check((3, 5), 1, |g, x| {
            let gain = g.constant(array![[1.0, 0.5, -2.0, 1.5, 0.3]]);
            let bias = g.constant(array![[0.1, 0.0, 0.2, -0.1, 0.0]]);
            let y = g.layer_norm(x, gain, bias);
            let w = g.constant(Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1 - 0.7));
            let p = g.mul(y, w);
            g.sum(p)
        });
    }

    #[test]
    fn attention_gradient_with_mask() {
        let mask = array![[true, false, true], [true, true, true], [false, false, true], [true, true, false]];
        fd_check((4, 4), 2, |g, x| {
            let k = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) % 5) as f64 * 0.3 - 0.5));
            let kk = g.matmul_t(k, x);
            let kk = g.rows(kk, &[0, 1, 2]);
            let v = g.scale(x, 0.7);
            let v = g.rows(v, &[3, 0, 1]);
            let o = g.attention(x, kk, v, 2, Some(&mask));
            let w = g.constant(Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.2));
            let p = g.mul(o, w);
            g.sum(p)
        });
    }

    #[test]
    fn log_softmax_pick_and_clamped_log_gradients() {
        fd_check((3, 4), 3, |g, x| {
            let ls = g.log_softmax(x);
            let picked = g.pick_cols(ls, &[0, 3, 1]);
            let sm = g.softmax(x);
            let p = g.pick_cols(sm, &[1, 1, 2]);
            let one_minus = g.affine(p, -1.0, 1.0);
            let l = g.clamp_ln(one_minus, 1e-9, 1.0);
            let both = g.concat(&[picked, l]);
            g.sum(both)
        });
    }

    #[test]
    fn gather_relu_and_row_bias_gradients() {
        fd_check((4, 3), 4, |g, x| {
            let e = g.gather(x, &[2, 0, 2, 3]);
            let b = g.constant(array![[0.1, -0.2, 0.05]]);
            let y = g.add_row(e, b);
            let y = g.relu(y);
            let z = g.sub(y, e);
            let m = g.mul(z, y);
            let s = g.add(m, e);
            g.sum(s)
        });
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let mut g = Graph::<f64>::new();
        let a = g.param(0, array![[1.0, 2.0]], false);
        let b = g.param(1, array![[3.0], [4.0]], true);
        let c = g.matmul(a, b);
        let grads = g.backward(c);
        assert!(!grads.contains_key(&0));
        assert_eq!(grads[&1], array![[1.0], [2.0]]);
    }
}
