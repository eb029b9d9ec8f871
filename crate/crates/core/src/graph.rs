//! A small reverse-mode automatic differentiation tape over 2-D arrays.
//!
//! Every value in the network is a row-major `(rows, cols)` matrix: sequences
//! are `(tokens, channels)` and vectors are `(1, n)`. Operations record just
//! enough state to run their adjoint, and [`Graph::backward`] walks the tape
//! in reverse. Parameters are borrowed from a [`ParamStore`] rather than
//! copied onto the tape.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat, Zip};

/// Floating point element type for the network: `f32` for training and
/// sampling, `f64` for gradient checks.
pub trait Real: NdFloat + std::iter::Sum + Default {
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of 2-D parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::c(x.f64())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    /// Elementwise with optional row broadcast of `b` when it has one row.
    Binary { a: Var, b: Var, kind: BinKind },
    Scale(Var, T),
    Silu(Var),
    Selu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, cols: Array2<T> },
    Rope { x: Var, tables: RopeTables<T>, heads: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<T>> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    GatherRows { x: Var, index: Vec<usize> },
    Mse { pred: Var, target: Var },
}

enum Value<T> {
    Owned(Array2<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients for every parameter of a [`ParamStore`], aligned by index.
pub type ParamGrads<T> = Vec<Array2<T>>;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

pub fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Cosine and sine tables shared by every rotary node with the same
/// positions and head width.
type RopeTables<T> = Arc<(Array2<T>, Array2<T>)>;

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    rope_cache: Vec<(Vec<f64>, usize, u64, RopeTables<T>)>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(512),
            rope_cache: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a.view(),
            Value::Param(id) => self.params.get(*id).view(),
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

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` with `b` a `(1, out)` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut out = self.value(x).dot(&self.value(w));
        out += &self.value(b);
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(
            bv.dim() == av.dim() || (bv.nrows() == 1 && bv.ncols() == av.ncols()),
            "binary op shape mismatch {:?} vs {:?}",
            av.dim(),
            bv.dim()
        );
        let out = match kind {
            BinKind::Add => &av + &bv,
            BinKind::Sub => &av - &bv,
            BinKind::Mul => &av * &bv,
        };
        self.push(out, Op::Binary { a, b, kind }, &[a, b])
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Sub)
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let (scale, alpha) = (T::c(SELU_SCALE), T::c(SELU_ALPHA));
        let out = self.value(x).mapv(|v| {
            if v > T::zero() {
                scale * v
            } else {
                scale * alpha * (v.exp() - T::one())
            }
        });
        self.push(out, Op::Selu(x), &[x])
    }

    /// Row-wise layer normalization without learned affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::c(xv.ncols() as f64);
        let eps = T::c(LAYER_NORM_EPS);
        let mut out = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Same-padded 1-D convolution along the row (time) axis.
    ///
    /// `w` has shape `(kernel * c_in, c_out)`; row `j * c_in + c` holds the
    /// weights for tap `j` (offset `j - kernel / 2`) and input channel `c`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        let cols = im2col(self.value(x), kernel);
        let mut out = cols.dot(&self.value(w));
        out += &self.value(b);
        self.push(out, Op::Conv1d { x, w, b, kernel, cols }, &[x, w, b])
    }

    /// Rotary embedding applied independently to each head's consecutive
    /// dimension pairs; token `i` sits at position `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[f64], heads: usize, base: f64) -> Var {
        let (len, width) = self.shape(x);
        assert_eq!(len, positions.len());
        let head_dim = width / heads;
        let cached = self
            .rope_cache
            .iter()
            .find(|(p, d, b, _)| *d == head_dim && *b == base.to_bits() && p.as_slice() == positions)
            .map(|c| c.3.clone());
        let tables = cached.unwrap_or_else(|| {
            let t = Arc::new(rope_tables::<T>(positions, head_dim, base));
            self.rope_cache.push((positions.to_vec(), head_dim, base.to_bits(), t.clone()));
            t
        });
        let out = rope_rotate(self.value(x), &tables.0, &tables.1, heads, false);
        self.push(out, Op::Rope { x, tables, heads }, &[x])
    }

    /// Multi-head scaled dot-product attention, full (unmasked).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, width) = qv.dim();
        assert_eq!(kv.dim(), vv.dim());
        assert_eq!(kv.ncols(), width);
        let d = width / heads;
        let scale = T::c(1.0 / (d as f64).sqrt());
        let mut out = Array2::zeros((lq, width));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Splits columns into `n` equal chunks.
    pub fn chunk_cols(&mut self, x: Var, n: usize) -> Vec<Var> {
        let w = self.shape(x).1 / n;
        (0..n).map(|i| self.slice_cols(x, i * w, w)).collect()
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.nrows() > 0, "mean of empty sequence");
        let n = T::c(xv.nrows() as f64);
        let out = xv.sum_axis(Axis(0)).mapv(|v| v / n).insert_axis(Axis(0));
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((index.len(), xv.ncols()));
        for (mut row, &i) in out.rows_mut().into_iter().zip(&index) {
            row.assign(&xv.row(i));
        }
        self.push(out, Op::GatherRows { x, index }, &[x])
    }

    /// Mean squared error over all elements, as a `(1, 1)` value.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.dim(), t.dim());
        let n = T::c(p.len() as f64);
        let sum = Zip::from(&p)
            .and(&t)
            .fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
        let out = Array2::from_elem((1, 1), sum / n);
        self.push(out, Op::Mse { pred, target }, &[pred, target])
    }

    /// Reverse pass from a scalar output; returns gradients for every
    /// parameter in the store (zero for parameters that were not used).
    pub fn backward(&self, output: Var) -> ParamGrads<T> {
        self.backward_seeded(output, Array2::from_elem((1, 1), T::one()))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_seeded(&self, output: Var, seed: Array2<T>) -> ParamGrads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.dim(), self.shape(output));
        grads[output.0] = Some(seed);
        let mut param_grads: ParamGrads<T> = self
            .params
            .values()
            .iter()
            .map(|v| Array2::zeros(v.raw_dim()))
            .collect();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, idx, g, &mut grads, &mut param_grads);
        }
        param_grads
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        idx: usize,
        g: Array2<T>,
        grads: &mut [Option<Array2<T>>],
        param_grads: &mut ParamGrads<T>,
    ) {
        match op {
            Op::Const => {}
            Op::Param(id) => param_grads[id.0] += &g,
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(&g);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Linear { x, w, b } => {
                if self.nodes[x.0].needs_grad {
                    let gx = g.dot(&self.value(*w).t());
                    self.accumulate(grads, *x, gx);
                }
                let gw = self.value(*x).t().dot(&g);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Binary { a, b, kind } => {
                let broadcast = self.shape(*b) != self.shape(*a);
                let (ga, gb) = match kind {
                    BinKind::Add => (g.clone(), g),
                    BinKind::Sub => (g.clone(), g.mapv(|v| -v)),
                    BinKind::Mul => {
                        let ga = &g * &self.value(*b);
                        let gb = &g * &self.value(*a);
                        (ga, gb)
                    }
                };
                self.accumulate(grads, *a, ga);
                let gb = if broadcast {
                    gb.sum_axis(Axis(0)).insert_axis(Axis(0))
                } else {
                    gb
                };
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.mapv(|v| v * *c)),
            Op::Silu(x) => {
                let mut gx = g;
                Zip::from(&mut gx).and(&self.value(*x)).for_each(|gv, &xv| {
                    let s = sigmoid(xv);
                    *gv = *gv * s * (T::one() + xv * (T::one() - s));
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Selu(x) => {
                let (scale, alpha) = (T::c(SELU_SCALE), T::c(SELU_ALPHA));
                let mut gx = g;
                Zip::from(&mut gx).and(&self.value(*x)).for_each(|gv, &xv| {
                    let d = if xv > T::zero() {
                        scale
                    } else {
                        scale * alpha * xv.exp()
                    };
                    *gv = *gv * d;
                });
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.value(Var(idx));
                let n = T::c(y.ncols() as f64);
                let mut gx = g;
                for ((mut grow, yrow), &r) in gx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = grow.sum() / n;
                    let mean_gy = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                    Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|gv, &yv| *gv = r * (*gv - mean_g - yv * mean_gy));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv1d { x, w, b, kernel, cols } => {
                let gw = cols.t().dot(&g);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let gcols = g.dot(&self.value(*w).t());
                    let (len, c_in) = self.shape(*x);
                    let gx = col2im(gcols.view(), len, c_in, *kernel);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Rope { x, tables, heads } => {
                let gx = rope_rotate(g.view(), &tables.0, &tables.1, *heads, true);
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let width = qv.ncols();
                let d = width / heads;
                let scale = T::c(1.0 / (d as f64).sqrt());
                let mut gq = Array2::zeros(qv.raw_dim());
                let mut gk = Array2::zeros(kv.raw_dim());
                let mut gv = Array2::zeros(vv.raw_dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * d..(h + 1) * d];
                    let go = g.slice(cols);
                    gv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = go.dot(&vv.slice(cols).t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
                    }
                    gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    self.accumulate(grads, p, g.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x).0;
                let row = g.mapv(|v| v / T::c(n as f64));
                let gx = row.broadcast((n, row.ncols())).unwrap().to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let mut gx = Array2::zeros(self.value(*x).raw_dim());
                for (grow, &i) in g.rows().into_iter().zip(index) {
                    let mut dst = gx.row_mut(i);
                    dst += &grow;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let c = g[[0, 0]] * T::c(2.0 / p.len() as f64);
                let diff = (&p - &t).mapv(|v| v * c);
                if self.nodes[target.0].needs_grad {
                    self.accumulate(grads, *target, diff.mapv(|v| -v));
                }
                self.accumulate(grads, *pred, diff);
            }
        }
    }
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows<T: Real>(a: &mut Array2<T>) {
    for mut row in a.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Unfolds a `(len, c_in)` sequence into `(len, kernel * c_in)` windows with
/// zero padding of `kernel / 2` on both ends.
pub fn im2col<T: Real>(x: ArrayView2<'_, T>, kernel: usize) -> Array2<T> {
    let (len, c_in) = x.dim();
    let pad = (kernel / 2) as isize;
    let mut cols = Array2::zeros((len, kernel * c_in));
    for i in 0..len {
        for j in 0..kernel {
            let src = i as isize + j as isize - pad;
            if src < 0 || src >= len as isize {
                continue;
            }
            cols.slice_mut(s![i, j * c_in..(j + 1) * c_in])
                .assign(&x.row(src as usize));
        }
    }
    cols
}

fn col2im<T: Real>(cols: ArrayView2<'_, T>, len: usize, c_in: usize, kernel: usize) -> Array2<T> {
    let pad = (kernel / 2) as isize;
    let mut x = Array2::zeros((len, c_in));
    for i in 0..len {
        for j in 0..kernel {
            let dst = i as isize + j as isize - pad;
            if dst < 0 || dst >= len as isize {
                continue;
            }
            let mut row = x.row_mut(dst as usize);
            row += &cols.slice(s![i, j * c_in..(j + 1) * c_in]);
        }
    }
    x
}

/// Cosine and sine tables of shape `(len, head_dim / 2)` with angle
/// `position * base^(-2k / head_dim)` for pair `k`.
pub fn rope_tables<T: Real>(positions: &[f64], head_dim: usize, base: f64) -> (Array2<T>, Array2<T>) {
    let half = head_dim / 2;
    let mut cos = Array2::zeros((positions.len(), half));
    let mut sin = Array2::zeros((positions.len(), half));
    let theta: Vec<f64> = (0..half).map(|k| base.powf(-2.0 * k as f64 / head_dim as f64)).collect();
    for (i, &p) in positions.iter().enumerate() {
        for (k, &th) in theta.iter().enumerate() {
            let angle = p * th;
            cos[[i, k]] = T::c(angle.cos());
            sin[[i, k]] = T::c(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotates each pair `(2k, 2k+1)` of every head; `inverse` rotates by the
/// negated angle (the adjoint of the forward rotation).
pub fn rope_rotate<T: Real>(
    x: ArrayView2<'_, T>,
    cos: &Array2<T>,
    sin: &Array2<T>,
    heads: usize,
    inverse: bool,
) -> Array2<T> {
    let (len, width) = x.dim();
    let d = width / heads;
    assert_eq!(d % 2, 0, "rotary embedding needs an even head dimension");
    let mut out = Array2::zeros((len, width));
    for i in 0..len {
        for h in 0..heads {
            for k in 0..d / 2 {
                let c0 = h * d + 2 * k;
                let (a, b) = (x[[i, c0]], x[[i, c0 + 1]]);
                let (c, s) = (cos[[i, k]], if inverse { -sin[[i, k]] } else { sin[[i, k]] });
                out[[i, c0]] = a * c - b * s;
                out[[i, c0 + 1]] = a * s + b * c;
            }
        }
    }
    out
}
