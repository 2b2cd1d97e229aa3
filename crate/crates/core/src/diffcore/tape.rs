//! Operation tape and the reverse sweep.

use super::array::{gemm, Array2, MatView, MatViewMut};
use super::params::{ParamId, ParamStore};
use super::DiffError;

/// Probabilities fed to [`Tape::bce`] are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
    Bce { pred: Var, target: Array2, reduction: Reduction },
    CrossEntropy { logits: Var, target: Array2, probs: Array2 },
}

struct Node {
    value: Array2,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> DiffError {
    DiffError::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Input that receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Array2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x.shape(), y.shape()));
        }
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x.shape(), y.shape()));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_row(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise normalization with learned `1 x cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(shape_err("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Array2::zeros(rows, cols);
        let mut out = Array2::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Scaled dot-product attention with `heads` column blocks.
    /// `q` is `n x d`, `k` and `v` are `m x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, DiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err("attention", kv.shape(), vv.shape()));
        }
        if heads == 0 || d % heads != 0 || kv.rows() == 0 {
            return Err(DiffError::ShapeMismatch(format!("attention: width {d} with {heads} heads")));
        }
        let (n, m, hd) = (qv.rows(), kv.rows(), d / heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = Array2::zeros(n, m);
            gemm(scale, MatView::cols(qv, h * hd, hd), MatView::cols(kv, h * hd, hd).t(), 0.0, MatViewMut::full(&mut p));
            for r in 0..n {
                softmax_row(p.row_mut(r));
            }
            gemm(1.0, MatView::full(&p), MatView::cols(vv, h * hd, hd), 0.0, MatViewMut::cols(&mut out, h * hd, hd));
            probs.push(p);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let a = self.value(p);
            if a.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), a.shape()));
            }
            rows += a.rows();
            data.extend_from_slice(a.data());
        }
        let out = Array2::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Array2::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let a = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + a.cols()].copy_from_slice(a.row(r));
            }
            c0 += a.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(DiffError::ShapeMismatch(format!("slice_cols {start}..{end} of {} columns", x.cols())));
        }
        let out = Array2::from_fn(x.rows(), end - start, |r, c| x.get(r, start + c));
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(DiffError::ShapeMismatch(format!("gather row {bad} of {}", x.rows())));
        }
        let out = x.gather_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Mean of all elements as a `1 x 1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = if x.is_empty() { 0.0 } else { x.sum() / x.len() as f64 };
        self.push(Array2::filled(1, 1, m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::filled(1, 1, s), Op::Sum(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Binary cross-entropy against fractional targets.
    pub fn bce(&mut self, pred: Var, target: &Array2, reduction: Reduction) -> Result<Var, DiffError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("bce", p.shape(), target.shape()));
        }
        let mut total = 0.0;
        for (&pv, &t) in p.data().iter().zip(target.data()) {
            let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        if reduction == Reduction::Mean && !p.is_empty() {
            total /= p.len() as f64;
        }
        Ok(self.push(Array2::filled(1, 1, total), Op::Bce { pred, target: target.clone(), reduction }))
    }

    /// Softmax cross-entropy treating every element of `logits` as one class.
    pub fn cross_entropy(&mut self, logits: Var, target: &Array2) -> Result<Var, DiffError> {
        let x = self.value(logits);
        if x.shape() != target.shape() {
            return Err(shape_err("cross_entropy", x.shape(), target.shape()));
        }
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss: f64 = x.data().iter().zip(target.data()).map(|(&v, &t)| if t == 0.0 { 0.0 } else { -t * (v - lse) }).sum();
        let probs = x.map(|v| (v - lse).exp());
        Ok(self.push(
            Array2::filled(1, 1, loss),
            Op::CrossEntropy { logits, target: target.clone(), probs },
        ))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::ShapeMismatch(format!("loss must be 1x1, got {}x{}", lv.rows(), lv.cols())));
        }
        if !lv.is_finite() {
            return Err(DiffError::NonFiniteDetected("loss".into()));
        }
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Array2>], v: Var, g: Array2) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::zeros(av.rows(), av.cols());
                    gemm(1.0, MatView::full(&g), MatView::full(bv).t(), 0.0, MatViewMut::full(&mut ga));
                    let mut gb = Array2::zeros(bv.rows(), bv.cols());
                    gemm(1.0, MatView::full(av).t(), MatView::full(&g), 0.0, MatViewMut::full(&mut gb));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let mut gb = Array2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |gv, y| gv * y);
                    let gb = g.zip_map(self.value(*a), |gv, x| gv * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut ga = Array2::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols() {
                            ga.set(r, c, p.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gamma);
                    let mut gg = Array2::zeros(1, cols);
                    let mut gbeta = Array2::zeros(1, cols);
                    let mut gx = Array2::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * hr[c];
                            gbeta.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data()[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx.set(r, c, is * (dxhat[c] - m1 - hr[c] * m2));
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let m = kv.rows();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut gq = Array2::zeros(n, d);
                    let mut gk = Array2::zeros(m, d);
                    let mut gvv = Array2::zeros(m, d);
                    for (h, p) in probs.iter().enumerate() {
                        let c0 = h * hd;
                        let mut dp = Array2::zeros(n, m);
                        gemm(1.0, MatView::cols(&g, c0, hd), MatView::cols(vv, c0, hd).t(), 0.0, MatViewMut::full(&mut dp));
                        gemm(1.0, MatView::full(p).t(), MatView::cols(&g, c0, hd), 0.0, MatViewMut::cols(&mut gvv, c0, hd));
                        for r in 0..n {
                            let dot: f64 = dp.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..m {
                                let val = p.get(r, c) * (dp.get(r, c) - dot) * scale;
                                dp.set(r, c, val);
                            }
                        }
                        gemm(1.0, MatView::full(&dp), MatView::cols(kv, c0, hd), 0.0, MatViewMut::cols(&mut gq, c0, hd));
                        gemm(1.0, MatView::full(&dp).t(), MatView::cols(qv, c0, hd), 0.0, MatViewMut::cols(&mut gk, c0, hd));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let cols = g.cols();
                        let part = Array2::new(rows, cols, g.data()[r0 * cols..(r0 + rows) * cols].to_vec())?;
                        acc(&mut grads, p, part);
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let part = Array2::from_fn(g.rows(), w, |r, c| g.get(r, c0 + c));
                        acc(&mut grads, p, part);
                        c0 += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros(rows, cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = (rows * cols).max(1) as f64;
                    acc(&mut grads, *a, Array2::filled(rows, cols, g.get(0, 0) / n));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Array2::filled(rows, cols, g.get(0, 0)));
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, g.scale(*s));
                }
                Op::Bce { pred, target, reduction } => {
                    let p = self.value(*pred);
                    let mut k = g.get(0, 0);
                    if *reduction == Reduction::Mean && !p.is_empty() {
                        k /= p.len() as f64;
                    }
                    let gp = p.zip_map(target, |pv, t| {
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            k * (pv - t) / (pv * (1.0 - pv))
                        }
                    });
                    acc(&mut grads, *pred, gp);
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let k = g.get(0, 0);
                    let tsum = target.sum();
                    let gl = probs.zip_map(target, |p, t| k * (p * tsum - t));
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                params.push((id, i));
            }
        }
        Ok(Gradients { by_node: grads, params })
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    by_node: Vec<Option<Array2>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.by_node[v.0].as_ref()
    }

    /// Per-parameter gradients aligned with `store`, zero where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Result<Vec<Array2>, DiffError> {
        let mut out: Vec<Array2> = store.values().iter().map(|v| Array2::zeros(v.rows(), v.cols())).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.by_node[node] {
                if !g.is_finite() {
                    return Err(DiffError::NonFiniteDetected(format!("gradient of {}", store.name(id))));
                }
                out[id.index()].add_assign(g);
            }
        }
        Ok(out)
    }
}
