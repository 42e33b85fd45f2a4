//! Reverse-mode autodiff over dense f64 matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; every
//! value is a 2-D array. [`Tape::backward`] seeds the (1x1) loss node and
//! sweeps the list in reverse, accumulating gradients in a parallel buffer.
//! Parameter gradients are written back to the [`ParamStore`] afterwards.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::mesh::spectral::SpectralBasis;
use crate::nn::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// General sparse matrix for fixed linear operators inside the tape
/// (tangent-gradient operators are not symmetric, so this is distinct from
/// the symmetric CSR used by the mesh kernel).
#[derive(Debug, Clone)]
pub struct SparseGen {
    pub shape: (usize, usize),
    /// rows[i] = (col, value) entries of row i
    pub rows: Vec<Vec<(usize, f64)>>,
    /// transpose rows, precomputed for the backward pass
    pub t_rows: Vec<Vec<(usize, f64)>>,
}

impl SparseGen {
    pub fn from_rows(shape: (usize, usize), rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), shape.0);
        let mut t_rows = vec![Vec::new(); shape.1];
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                assert!(j < shape.1);
                t_rows[j].push((i, v));
            }
        }
        SparseGen { shape, rows, t_rows }
    }

    fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.nrows(), self.shape.1);
        let mut out = Mat::zeros((self.shape.0, x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                for c in 0..x.ncols() {
                    out[(i, c)] += v * x[(j, c)];
                }
            }
        }
        out
    }

    fn apply_transpose(&self, x: &Mat) -> Mat {
        assert_eq!(x.nrows(), self.shape.0);
        let mut out = Mat::zeros((self.shape.1, x.ncols()));
        for (j, row) in self.t_rows.iter().enumerate() {
            for &(i, v) in row {
                for c in 0..x.ncols() {
                    out[(j, c)] += v * x[(i, c)];
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Dropout {
        x: Var,
        mask: Mat,
    },
    SpectralDiffuse {
        x: Var,
        times: Var,
        basis: Rc<SpectralBasis>,
        mass: Rc<Vec<f64>>,
        saved_coeffs: Mat, // phi^T M x, k-by-c
        saved_filter: Mat, // 1/(1 + t_c lambda_k), k-by-c
    },
    SparseApply {
        x: Var,
        mat: Rc<SparseGen>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.nrows(), m.ncols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.nrows(), m.ncols()), (1, 1), "scalar() on non-1x1 value");
        m[(0, 0)]
    }

    /// Constant input; gradients stop here.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter input; gradients are collected for the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    /// (r, c) + (1, c), the bias/broadcast add.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "row broadcast shape mismatch");
        let mut value = self.value(x).clone();
        for i in 0..r {
            for j in 0..c {
                value[(i, j)] += self.value(row)[(0, j)];
            }
        }
        self.push(value, Op::AddRowBroadcast(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Mat::zeros((r, total));
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), r, "concat_cols row mismatch");
            value
                .slice_mut(ndarray::s![.., at..at + m.ncols()])
                .assign(m);
            at += m.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(value, Op::SliceCols(a, lo, hi))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![lo..hi, ..]).to_owned();
        self.push(value, Op::SliceRows(a, lo, hi))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        self.push(value, Op::GatherRows(a, rows))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_tanh);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Row-wise softmax with the max-subtraction trick; additive masks are
    /// applied by `add`ing a bias matrix to the logits beforehand.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row layer normalization with learned gain/bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let mut value = Mat::zeros((r, c));
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                let normalized = (xv[(i, j)] - mean) * inv_std;
                value[(i, j)] = normalized * self.value(gain)[(0, j)] + self.value(bias)[(0, j)];
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias })
    }

    /// Inverted dropout; `keep` entries are scaled by 1/(1-p).
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        assert!((0.0..1.0).contains(&p));
        if p == 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let scale = 1.0 / (1.0 - p);
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                scale
            }
        });
        let value = self.value(x) * &mask;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Heat diffusion through a truncated spectral basis with one learned
    /// diffusion time per channel: `x + phi ((1/(1+t_c lambda)-1) .* (phi^T M x))`.
    /// `times` is (1, c) and must already be positive (e.g. softplus output).
    pub fn spectral_diffuse(
        &mut self,
        x: Var,
        times: Var,
        basis: Rc<SpectralBasis>,
        mass: Rc<Vec<f64>>,
    ) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.shape(times), (1, c));
        assert_eq!(basis.basis.nrows(), n);
        let k = basis.k();
        let xv = self.value(x);
        let mut mx = xv.clone();
        for i in 0..n {
            for ch in 0..c {
                mx[(i, ch)] *= mass[i];
            }
        }
        let coeffs = basis.basis.t().dot(&mx); // k x c
        let mut filter = Mat::zeros((k, c));
        for j in 0..k {
            let lambda = basis.eigenvalues[j].max(0.0);
            for ch in 0..c {
                let t = self.value(times)[(0, ch)];
                filter[(j, ch)] = 1.0 / (1.0 + t * lambda);
            }
        }
        let weighted = &coeffs * &(filter.clone() - 1.0);
        let value = xv + &basis.basis.dot(&weighted);
        self.push(
            value,
            Op::SpectralDiffuse {
                x,
                times,
                basis,
                mass,
                saved_coeffs: coeffs,
                saved_filter: filter,
            },
        )
    }

    /// Fixed sparse linear operator (gradients flow through the transpose).
    pub fn sparse_apply(&mut self, mat: Rc<SparseGen>, x: Var) -> Var {
        let value = mat.apply(self.value(x));
        self.push(value, Op::SparseApply { x, mat })
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut Vec<Option<Mat>>) {
        let acc = |grads: &mut Vec<Option<Mat>>, v: Var, delta: Mat| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[b.0].value);
                acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g * *s);
            }
            Op::AddRowBroadcast(x, row) => {
                acc(grads, *x, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *row, summed);
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, g.dot(&bv.t()));
                acc(grads, *b, av.t().dot(g));
            }
            Op::Transpose(a) => {
                acc(grads, *a, g.t().to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    let slice = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    acc(grads, p, slice);
                    at += w;
                }
            }
            Op::SliceCols(a, lo, _hi) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let mut delta = Mat::zeros((r, c));
                delta
                    .slice_mut(ndarray::s![.., *lo..*lo + g.ncols()])
                    .assign(g);
                acc(grads, *a, delta);
            }
            Op::SliceRows(a, lo, _hi) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let mut delta = Mat::zeros((r, c));
                delta
                    .slice_mut(ndarray::s![*lo..*lo + g.nrows(), ..])
                    .assign(g);
                acc(grads, *a, delta);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                let mut delta = Mat::zeros((r, c));
                for (gi, &ri) in rows.iter().enumerate() {
                    for j in 0..c {
                        delta[(ri, j)] += g[(gi, j)];
                    }
                }
                acc(grads, *a, delta);
            }
            Op::SumAll(a) => {
                let (r, c) = (self.nodes[a.0].value.nrows(), self.nodes[a.0].value.ncols());
                acc(grads, *a, Mat::from_elem((r, c), g[(0, 0)]));
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                let delta = Mat::from_shape_fn(g.dim(), |idx| {
                    if av[idx] > 0.0 {
                        g[idx]
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, delta);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let delta = Mat::from_shape_fn(g.dim(), |idx| g[idx] * gelu_tanh_deriv(av[idx]));
                acc(grads, *a, delta);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[i].value;
                let delta = Mat::from_shape_fn(g.dim(), |idx| g[idx] * (1.0 - yv[idx] * yv[idx]));
                acc(grads, *a, delta);
            }
            Op::Softplus(a) => {
                let av = &self.nodes[a.0].value;
                let delta = Mat::from_shape_fn(g.dim(), |idx| g[idx] * sigmoid(av[idx]));
                acc(grads, *a, delta);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut delta = Mat::zeros(g.dim());
                for r in 0..g.nrows() {
                    let dot: f64 = (0..g.ncols()).map(|j| g[(r, j)] * y[(r, j)]).sum();
                    for j in 0..g.ncols() {
                        delta[(r, j)] = y[(r, j)] * (g[(r, j)] - dot);
                    }
                }
                acc(grads, *a, delta);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (r, c) = (xv.nrows(), xv.ncols());
                let mut dx = Mat::zeros((r, c));
                let mut dgain = Mat::zeros((1, c));
                let mut dbias = Mat::zeros((1, c));
                for ri in 0..r {
                    let row = xv.row(ri);
                    let mean = row.sum() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + LN_EPS).sqrt();
                    // dxhat, and the two row-reductions of the standard formula
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        let xhat = (xv[(ri, j)] - mean) * inv_std;
                        let d = g[(ri, j)] * gv[(0, j)];
                        dxhat[j] = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                        dgain[(0, j)] += g[(ri, j)] * xhat;
                        dbias[(0, j)] += g[(ri, j)];
                    }
                    for j in 0..c {
                        let xhat = (xv[(ri, j)] - mean) * inv_std;
                        dx[(ri, j)] = inv_std
                            * (dxhat[j] - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, g * mask);
            }
            Op::SpectralDiffuse {
                x,
                times,
                basis,
                mass,
                saved_coeffs,
                saved_filter,
            } => {
                let (n, c) = (g.nrows(), g.ncols());
                let k = basis.k();
                // grad wrt x: g + M phi ((f-1) .* (phi^T g))
                let pg = basis.basis.t().dot(g); // k x c
                let weighted = &pg * &(saved_filter - 1.0);
                let mut back = basis.basis.dot(&weighted); // n x c
                for i in 0..n {
                    for ch in 0..c {
                        back[(i, ch)] *= mass[i];
                    }
                }
                acc(grads, *x, g + &back);
                // grad wrt t_c: sum_k (phi^T g)_kc * (-lambda_k f_kc^2) * coeffs_kc
                let mut dt = Mat::zeros((1, c));
                for ch in 0..c {
                    let mut acc_t = 0.0;
                    for j in 0..k {
                        let lambda = basis.eigenvalues[j].max(0.0);
                        let f = saved_filter[(j, ch)];
                        acc_t += pg[(j, ch)] * (-lambda * f * f) * saved_coeffs[(j, ch)];
                    }
                    dt[(0, ch)] = acc_t;
                }
                acc(grads, *times, dt);
            }
            Op::SparseApply { x, mat } => {
                acc(grads, *x, mat.apply_transpose(g));
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient buffer produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Add every parameter node's gradient into the store's buffers.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of the stable softplus, for initializing pre-activation times.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    // x = ln(e^y - 1); for large y this is y to machine precision
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}
