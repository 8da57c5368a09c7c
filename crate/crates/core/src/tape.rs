//! Reverse-mode automatic differentiation over row-major 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read in place from a borrowed [`ParamStore`]; [`Tape::backward`] returns
//! gradients keyed by [`ParamId`]. Frozen parameters are plain constants on
//! the tape and never receive a gradient.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{shape_err, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    MeanAll(Var),
    Mse(Var, Var),
    L1(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<F>,
    },
}

struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'s, F: Real> {
    store: &'s ParamStore<F>,
    trainable: Option<&'s [bool]>,
    nodes: Vec<Node<F>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// Row-wise softmax of `scores * scale`; entries with column index greater
/// than `row + causal_offset` are masked when `causal_offset` is set.
pub fn softmax_rows<F: Real>(scores: &Array2<F>, causal_offset: Option<usize>) -> Array2<F> {
    let mut out = scores.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let limit = causal_offset.map_or(row.len(), |o| (i + o + 1).min(row.len()));
        let mut max = F::neg_infinity();
        for &x in row.iter().take(limit) {
            max = max.max(x);
        }
        let mut sum = F::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if j < limit {
                *x = (*x - max).exp();
                sum = sum + *x;
            } else {
                *x = F::zero();
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
    out
}

impl<'s, F: Real> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            store,
            trainable: None,
            nodes: Vec::with_capacity(256),
        }
    }

    /// A tape on which only parameters with `mask[id] == true` get gradients;
    /// ids past the end of the mask are frozen.
    pub fn with_trainable(store: &'s ParamStore<F>, mask: &'s [bool]) -> Self {
        Self {
            store,
            trainable: Some(mask),
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Reads a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = self.trainable.is_none_or(|m| m.get(id.0).copied().unwrap_or(false));
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Attention probabilities of every attention node, in recording order.
    pub fn all_attention_probs(&self) -> impl Iterator<Item = &[Array2<F>]> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Attention { probs, .. } => Some(probs.as_slice()),
            _ => None,
        })
    }

    /// Attention probabilities stored by an attention node, one per head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- operations -------------------------------------------------------

    /// `x · w + b` with `b` a single row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if xc != wr {
            return Err(shape_err!("affine: x {xr}x{xc} vs w {wr}x{wc}"));
        }
        let mut out = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.dim() != (1, wc) {
                return Err(shape_err!("affine: bias {:?} vs out cols {wc}", bv.dim()));
            }
            out += bv;
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err!("matmul: {ar}x{ac} · {br}x{bc}"));
        }
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(shape_err!("matmul_nt: {ar}x{ac} · ({br}x{bc})ᵀ"));
        }
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(shape_err!("add_row: row {:?} vs cols {ac}", self.shape(row)));
        }
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).mapv(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.exp());
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(shape_err!("layer_norm: gamma/beta must be 1x{cols}"));
        }
        let eps = F::lit(1e-5);
        let n = F::lit(cols as f64);
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * r;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention split over `heads` column groups.
    /// With `causal`, query `i` sees keys `0..=i + (Lk - Lq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        let (lv, dv) = self.shape(v);
        if dk != d || lv != lk || dv != d {
            return Err(shape_err!(
                "attention: q {lq}x{d}, k {lk}x{dk}, v {lv}x{dv}"
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("attention: dim {d} not divisible by {heads} heads"));
        }
        if causal && lq > lk {
            return Err(shape_err!("attention: causal needs Lq <= Lk"));
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let offset = causal.then(|| lk - lq);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((lq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = qv.slice(s![.., cols.clone()]);
            let kh = kv.slice(s![.., cols.clone()]);
            let vh = vv.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let p = softmax_rows(&scores, offset);
            out.slice_mut(s![.., cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err!("concat_rows: column counts differ"));
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.shape(a);
        if start + len > r {
            return Err(shape_err!("slice_rows: {start}+{len} > {r}"));
        }
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err!("slice_cols: {start}+{len} > {c}"));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Selects rows by index (embedding lookup, placeholder extraction).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err!("gather_rows: index {bad} out of {r} rows"));
        }
        let src = self.value(a);
        let mut out = Array2::zeros((idx.len(), c));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&src.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Column means as a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / F::lit(v.len() as f64);
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), ng)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut acc = F::zero();
        Zip::from(av).and(bv).for_each(|&x, &y| acc = acc + (x - y) * (x - y));
        let m = acc / F::lit(av.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array2::from_elem((1, 1), m), Op::Mse(a, b), ng))
    }

    /// Mean absolute difference over all entries.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut acc = F::zero();
        Zip::from(av).and(bv).for_each(|&x, &y| acc = acc + (x - y).abs());
        let m = acc / F::lit(av.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array2::from_elem((1, 1), m), Op::L1(a, b), ng))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(shape_err!("cross_entropy: labels do not match {r}x{c} logits"));
        }
        let probs = softmax_rows(self.value(logits), None);
        let nll = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[[i, l]].max(F::min_positive_value())).ln())
            .sum::<F>()
            / F::lit(r as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), nll),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the 1×1 node `loss` with respect to every trainable
    /// parameter reached by it.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut out = Grads::new(self.store.len());
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, d: Array2<F>| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => *acc += &d,
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate_owned(*id, g),
                Op::Affine { x, w, b } => {
                    if self.ng(*x) {
                        send(*x, g.dot(&self.value(*w).t()));
                    }
                    if self.ng(*w) {
                        send(*w, self.value(*x).t().dot(&g));
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.mapv(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.mapv(|x| x * *s)),
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d = *d * gelu_grad(x));
                    send(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    send(*a, d);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().expect("exp value");
                    send(*a, &g * y);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.ng(*gamma) {
                        send(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*beta) {
                        send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = F::lit(dxhat.ncols() as f64);
                        let mut dx = Array2::zeros(dxhat.raw_dim());
                        for i in 0..dxhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let m1 = dr.sum() / n;
                            let m2 = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                            for j in 0..dxhat.ncols() {
                                dx[[i, j]] = rstd[i] * (dr[j] - m1 - xr[j] * m2);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let d = self.shape(*q).1;
                    let dh = d / heads;
                    let scale = F::one() / F::lit(dh as f64).sqrt();
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![.., cols.clone()]);
                        let vh = vv.slice(s![.., cols.clone()]);
                        dv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                            let dot: F = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|r, &pp| {
                                *r = *r - pp * dot;
                            });
                        }
                        ds.mapv_inplace(|x| x * scale);
                        let kh = kv.slice(s![.., cols.clone()]);
                        let qh = qv.slice(s![.., cols.clone()]);
                        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.ng(p) {
                            send(p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.ng(p) {
                            send(p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (o, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(o);
                    }
                    send(*a, d);
                }
                Op::MeanRows(a) => {
                    let rows = self.shape(*a).0;
                    let row = g.mapv(|x| x / F::lit(rows as f64));
                    let d = row.broadcast(self.value(*a).raw_dim()).expect("row").to_owned();
                    send(*a, d);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len();
                    let v = g[[0, 0]] / F::lit(n as f64);
                    send(*a, Array2::from_elem(self.value(*a).raw_dim(), v));
                }
                Op::Mse(a, b) => {
                    let n = self.value(*a).len();
                    let c = g[[0, 0]] * F::lit(2.0) / F::lit(n as f64);
                    let diff = (self.value(*a) - self.value(*b)).mapv(|x| x * c);
                    if self.ng(*b) {
                        send(*b, diff.mapv(|x| -x));
                    }
                    send(*a, diff);
                }
                Op::L1(a, b) => {
                    let n = self.value(*a).len();
                    let c = g[[0, 0]] / F::lit(n as f64);
                    let sign = (self.value(*a) - self.value(*b)).mapv(|x| {
                        if x > F::zero() {
                            c
                        } else if x < F::zero() {
                            -c
                        } else {
                            F::zero()
                        }
                    });
                    if self.ng(*b) {
                        send(*b, sign.mapv(|x| -x));
                    }
                    send(*a, sign);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = F::lit(labels.len() as f64);
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[[i, l]] = d[[i, l]] - F::one();
                    }
                    let c = g[[0, 0]] / n;
                    d.mapv_inplace(|x| x * c);
                    send(*logits, d);
                }
            }
        }
        Ok(out)
    }
}
