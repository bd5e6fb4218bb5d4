//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Every value is a 2-D array of `rows x cols`; sequences and voxel grids are
//! stored one position per row. The tape records operations in execution
//! order and [`Tape::backward`] walks it in reverse.

use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type used by the policy.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
    /// `exp` used by softmax and GELU; single precision swaps in a
    /// branch-free polynomial that the compiler can vectorize.
    fn exp_k(self) -> Self {
        self.exp()
    }
    fn tanh_k(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn exp_k(self) -> Self {
        exp_f32(self)
    }
    #[inline(always)]
    fn tanh_k(self) -> Self {
        // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly at both ends.
        1.0 - 2.0 / (exp_f32(2.0 * self) + 1.0)
    }
}
impl Scalar for f64 {}

/// Cephes-style `expf`: range reduction by `ln 2` and a degree-6 polynomial.
/// Relative error stays within a few ulp over the clamped domain.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding and removing 1.5 * 2^23 rounds to nearest without a libm call.
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    for c in [1.398_199_9e-3, 8.333_452e-3, 4.166_579_6e-2, 1.666_666_5e-1, 0.5] {
        p = p * r + c;
    }
    let p = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row gather: output row `r` is the concatenation of `slots` source rows
/// (or zeros where the index is `PAD`).
#[derive(Debug)]
pub struct GatherMap {
    pub out_rows: usize,
    pub slots: usize,
    pub index: Vec<u32>,
}

impl GatherMap {
    pub const PAD: u32 = u32::MAX;
}

/// Sparse linear mixing of rows: `out[i] = sum_j w_ij * in[j]` (CSR layout).
#[derive(Debug)]
pub struct SparseMap {
    pub in_rows: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseMap {
    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<F>, inv_std: Vec<F> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<F>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Gather { x: Var, map: Arc<GatherMap> },
    SparseMix { x: Var, map: Arc<SparseMap> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    TileRows { x: Var },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

/// Operation recorder. With `record = false` no backward caches are kept.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    record: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline(always)]
fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_K) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh_k())
}

#[inline(always)]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_K) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh_k();
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * F::of(GELU_K) * (F::one() + F::of(3.0 * GELU_A) * x * x)
}

fn softmax_rows_inplace<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let row = row.as_slice_mut().expect("rows of a standard-layout array are contiguous");
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        // Separate passes so the exponentials vectorize.
        for v in row.iter_mut() {
            *v = (*v - max).exp_k();
        }
        let inv = F::one() / row.iter().fold(F::zero(), |a, &b| a + b);
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new(record: bool) -> Self {
        Self { nodes: Vec::new(), record }
    }

    pub fn records(&self) -> bool {
        self.record
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a single row broadcast over all rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = F::of(xv.ncols() as f64);
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / c;
            let inv = F::one() / (var + F::of(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let (xhat, inv_std) = if self.record { (xhat, inv_std) } else { (Array2::zeros((0, 0)), Vec::new()) };
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are already
    /// projected; their column count is split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert!(dim % heads == 0 && kv.ncols() == dim && vv.ncols() == dim && kv.nrows() == vv.nrows());
        let dh = dim / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((qv.nrows(), dim));
        let mut probs = Vec::new();
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            if self.record {
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn gather(&mut self, x: Var, map: Arc<GatherMap>) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        let mut out = Array2::<F>::zeros((map.out_rows, map.slots * c));
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            for s in 0..map.slots {
                let j = map.index[r * map.slots + s];
                if j != GatherMap::PAD {
                    row.slice_mut(s![s * c..(s + 1) * c]).assign(&src.row(j as usize));
                }
            }
        }
        self.push(out, Op::Gather { x, map })
    }

    pub fn sparse_mix(&mut self, x: Var, map: Arc<SparseMap>) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), map.in_rows);
        let c = src.ncols();
        let mut out = Array2::<F>::zeros((map.out_rows(), c));
        let src_slice = src.as_slice().expect("contiguous");
        let out_slice = out.as_slice_mut().expect("contiguous");
        for i in 0..map.out_rows() {
            let dst = &mut out_slice[i * c..(i + 1) * c];
            for e in map.offsets[i]..map.offsets[i + 1] {
                let w = F::of(map.weights[e]);
                let j = map.cols[e] as usize;
                for (d, s) in dst.iter_mut().zip(&src_slice[j * c..(j + 1) * c]) {
                    *d = *d + w * *s;
                }
            }
        }
        self.push(out, Op::SparseMix { x, map })
    }

    /// Column-wise maximum over all rows (first maximum wins ties).
    pub fn max_pool_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = Array2::from_elem((1, src.ncols()), F::neg_infinity());
        let mut argmax = vec![0usize; src.ncols()];
        for (r, row) in src.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if *v > out[[0, c]] {
                    out[[0, c]] = *v;
                    argmax[c] = r;
                }
            }
        }
        self.push(out, Op::MaxPoolRows { x, argmax })
    }

    /// Repeat a single row `n` times.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.nrows(), 1);
        let v = src.broadcast((n, src.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::TileRows { x })
    }

    /// Propagate `seeds` (gradients of a scalar objective with respect to the
    /// given vars) back through the tape.
    pub fn backward(&self, seeds: Vec<(Var, Array2<F>)>) -> Gradients<F> {
        assert!(self.record, "backward requires a recording tape");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Gelu(x) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|d, &xv| *d = *d * gelu_grad(xv));
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let c = F::of(xhat.ncols() as f64);
                let mut gx = Array2::<F>::zeros(xhat.raw_dim());
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_d = dh.sum();
                    let sum_dx = dh.iter().zip(xh.iter()).fold(F::zero(), |a, (d, x)| a + *d * *x);
                    let k = inv_std[r] / c;
                    for ((o, d), x) in row.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                        *o = k * (c * *d - sum_d - *x * sum_dx);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let mut gq = Array2::<F>::zeros(qv.raw_dim());
                let mut gk = Array2::<F>::zeros(kv.raw_dim());
                let mut gv = Array2::<F>::zeros(vv.raw_dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    gv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = go.dot(&vv.slice(cols).t());
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = drow.iter().zip(prow.iter()).fold(F::zero(), |a, (d, p)| a + *d * *p);
                        Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot) * scale);
                    }
                    gq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    gk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows { x, start } => {
                let mut gx = Array2::<F>::zeros(self.value(*x).raw_dim());
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, map } => {
                let src = self.value(*x);
                let c = src.ncols();
                let mut gx = Array2::<F>::zeros(src.raw_dim());
                for (r, row) in g.rows().into_iter().enumerate() {
                    for s in 0..map.slots {
                        let j = map.index[r * map.slots + s];
                        if j != GatherMap::PAD {
                            let mut dst = gx.row_mut(j as usize);
                            dst += &row.slice(s![s * c..(s + 1) * c]);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SparseMix { x, map } => {
                let src = self.value(*x);
                let c = src.ncols();
                let mut gx = Array2::<F>::zeros(src.raw_dim());
                let gs = g.as_standard_layout();
                let g_slice = gs.as_slice().expect("contiguous");
                let gx_slice = gx.as_slice_mut().expect("contiguous");
                for i in 0..map.out_rows() {
                    let gi = &g_slice[i * c..(i + 1) * c];
                    for e in map.offsets[i]..map.offsets[i + 1] {
                        let w = F::of(map.weights[e]);
                        let j = map.cols[e] as usize;
                        for (d, s) in gx_slice[j * c..(j + 1) * c].iter_mut().zip(gi) {
                            *d = *d + w * *s;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxPoolRows { x, argmax } => {
                let mut gx = Array2::<F>::zeros(self.value(*x).raw_dim());
                for (c, r) in argmax.iter().enumerate() {
                    gx[[*r, c]] = gx[[*r, c]] + g[[0, c]];
                }
                accumulate(grads, *x, gx);
            }
            Op::TileRows { x } => {
                accumulate(grads, *x, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients for every var reached during a backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads[v.0].take()
    }
}
