//! Intrinsic surface network blocks: learned per-channel heat diffusion in a
//! truncated spectral basis, optional tangent-gradient features, and a
//! per-vertex MLP with a residual connection. Robust to remeshing because
//! every geometric operation factors through the Laplacian.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::mesh::operators::SurfaceOperators;
use crate::mesh::spectral::SpectralBasis;
use crate::mesh::Mesh;
use crate::nn::layers::Linear;
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{softplus_inverse, Mat, SparseGen, Tape, Var};

/// Per-mesh precomputation shared by the encoder and decoder: spectral basis,
/// mass, raw input features, and (optionally) tangent-gradient operators.
pub struct MeshBundle {
    pub basis: Rc<SpectralBasis>,
    pub mass: Rc<Vec<f64>>,
    pub grad_x: Option<Rc<SparseGen>>,
    pub grad_y: Option<Rc<SparseGen>>,
    /// Raw vertex inputs: coordinates and normals, n-by-6.
    pub input_features: Mat,
    pub mean_edge_length: f64,
}

impl MeshBundle {
    pub fn new(mesh: &Mesh, ops: &SurfaceOperators, need_gradients: bool) -> Result<MeshBundle> {
        let basis = ops.spectral.clone().ok_or_else(|| {
            CoreError::Config("mesh operators were built without a spectral basis".into())
        })?;
        let n = mesh.n_vertices();
        let mut input_features = Mat::zeros((n, 6));
        for i in 0..n {
            let p = mesh.vertex(i);
            for k in 0..3 {
                input_features[(i, k)] = p[k];
                input_features[(i, 3 + k)] = ops.normals[(i, k)];
            }
        }
        let (grad_x, grad_y) = if need_gradients {
            let (gx, gy) = tangent_gradient_operators(mesh, &ops.normals);
            (Some(Rc::new(gx)), Some(Rc::new(gy)))
        } else {
            (None, None)
        };
        Ok(MeshBundle {
            basis: Rc::new(basis),
            mass: Rc::new(ops.mass.clone()),
            grad_x,
            grad_y,
            input_features,
            mean_edge_length: ops.mean_edge_length,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.input_features.nrows()
    }
}

/// Per-vertex tangent-plane gradient as two sparse operators (frame x / y
/// components), from a weighted one-ring least-squares fit.
pub fn tangent_gradient_operators(mesh: &Mesh, normals: &Array2<f64>) -> (SparseGen, SparseGen) {
    let n = mesh.n_vertices();
    let mut neighbors: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for f in mesh.faces() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    }
    let mut rows_x: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut rows_y: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let ni = [normals[(i, 0)], normals[(i, 1)], normals[(i, 2)]];
        // orthonormal tangent frame
        let helper = if ni[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let mut e1 = crate::mesh::cross3(ni, helper);
        let norm = crate::mesh::norm3(e1);
        e1 = [e1[0] / norm, e1[1] / norm, e1[2] / norm];
        let e2 = crate::mesh::cross3(ni, e1);

        let pi = mesh.vertex(i);
        let mut s = [[0.0f64; 2]; 2];
        let mut coords = Vec::new();
        for &j in &neighbors[i] {
            let d = crate::mesh::sub3(mesh.vertex(j), pi);
            let a = crate::mesh::dot3(d, e1);
            let b = crate::mesh::dot3(d, e2);
            s[0][0] += a * a;
            s[0][1] += a * b;
            s[1][0] += a * b;
            s[1][1] += b * b;
            coords.push((j, a, b));
        }
        let trace = s[0][0] + s[1][1];
        let reg = 1e-8 * trace.max(1e-12);
        s[0][0] += reg;
        s[1][1] += reg;
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let mut row_x = Vec::with_capacity(coords.len() + 1);
        let mut row_y = Vec::with_capacity(coords.len() + 1);
        if det.abs() > 1e-300 && !coords.is_empty() {
            let inv = [
                [s[1][1] / det, -s[0][1] / det],
                [-s[1][0] / det, s[0][0] / det],
            ];
            let mut self_x = 0.0;
            let mut self_y = 0.0;
            for &(j, a, b) in &coords {
                let wx = inv[0][0] * a + inv[0][1] * b;
                let wy = inv[1][0] * a + inv[1][1] * b;
                row_x.push((j, wx));
                row_y.push((j, wy));
                self_x -= wx;
                self_y -= wy;
            }
            row_x.push((i, self_x));
            row_y.push((i, self_y));
        }
        rows_x.push(row_x);
        rows_y.push(row_y);
    }
    (
        SparseGen::from_rows((n, n), rows_x),
        SparseGen::from_rows((n, n), rows_y),
    )
}

pub struct IntrinsicBlock {
    diffusion_times: ParamId, // pre-softplus, 1-by-width
    grad_re: Option<ParamId>,
    grad_im: Option<ParamId>,
    mlp1: Linear,
    mlp2: Linear,
    width: usize,
}

impl IntrinsicBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        gradient_features: bool,
        time_init: f64,
    ) -> IntrinsicBlock {
        let pre = softplus_inverse(time_init.max(1e-8));
        let diffusion_times =
            store.register(format!("{name}.times"), Mat::from_elem((1, width), pre), true);
        let (grad_re, grad_im) = if gradient_features {
            (
                Some(store.register(
                    format!("{name}.grad_re"),
                    crate::nn::params::xavier_uniform(width, width, rng),
                    false,
                )),
                Some(store.register(
                    format!("{name}.grad_im"),
                    crate::nn::params::xavier_uniform(width, width, rng),
                    false,
                )),
            )
        } else {
            (None, None)
        };
        let in_width = if gradient_features { 3 * width } else { 2 * width };
        IntrinsicBlock {
            diffusion_times,
            grad_re,
            grad_im,
            mlp1: Linear::new(store, rng, &format!("{name}.mlp1"), in_width, width, true),
            mlp2: Linear::new(store, rng, &format!("{name}.mlp2"), width, width, true),
            width,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, bundle: &MeshBundle, x: Var) -> Var {
        let pre_times = tape.param(store, self.diffusion_times);
        let times = tape.softplus(pre_times);
        let diffused = tape.spectral_diffuse(x, times, bundle.basis.clone(), bundle.mass.clone());
        let mut parts = vec![x, diffused];
        if let (Some(re_id), Some(im_id)) = (self.grad_re, self.grad_im) {
            let gx = bundle
                .grad_x
                .as_ref()
                .expect("gradient features need gradient operators")
                .clone();
            let gy = bundle.grad_y.as_ref().unwrap().clone();
            let zx = tape.sparse_apply(gx, diffused);
            let zy = tape.sparse_apply(gy, diffused);
            // complex channel mix u = A z, then invariant Re(conj(z) . u)
            let a_re = tape.param(store, re_id);
            let a_im = tape.param(store, im_id);
            let a_re_t = tape.transpose(a_re);
            let a_im_t = tape.transpose(a_im);
            let zx_re = tape.matmul(zx, a_re_t);
            let zy_im = tape.matmul(zy, a_im_t);
            let ux = tape.sub(zx_re, zy_im);
            let zy_re = tape.matmul(zy, a_re_t);
            let zx_im = tape.matmul(zx, a_im_t);
            let uy = tape.add(zy_re, zx_im);
            let px = tape.mul(zx, ux);
            let py = tape.mul(zy, uy);
            let dot = tape.add(px, py);
            parts.push(tape.tanh(dot));
        }
        let stacked = tape.concat_cols(&parts);
        let h = self.mlp1.apply(tape, store, stacked);
        let h = tape.gelu(h);
        let h = self.mlp2.apply(tape, store, h);
        tape.add(x, h)
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Stack of intrinsic blocks with linear input/output projections.
pub struct IntrinsicNet {
    pub in_proj: Linear,
    pub blocks: Vec<IntrinsicBlock>,
    pub out_proj: Option<Linear>,
}

impl IntrinsicNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        width: usize,
        d_out: Option<usize>,
        n_blocks: usize,
        gradient_features: bool,
        time_init: f64,
    ) -> IntrinsicNet {
        let in_proj = Linear::new(store, rng, &format!("{name}.in"), d_in, width, true);
        let blocks = (0..n_blocks)
            .map(|i| {
                IntrinsicBlock::new(
                    store,
                    rng,
                    &format!("{name}.block{i}"),
                    width,
                    gradient_features,
                    time_init,
                )
            })
            .collect();
        // output heads start as the zero map
        let out_proj = d_out.map(|d| Linear::new_zeroed(store, &format!("{name}.out"), width, d));
        IntrinsicNet {
            in_proj,
            blocks,
            out_proj,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, bundle: &MeshBundle, x: Var) -> Var {
        let mut h = self.in_proj.apply(tape, store, x);
        for block in &self.blocks {
            h = block.apply(tape, store, bundle, h);
        }
        match &self.out_proj {
            Some(p) => p.apply(tape, store, h),
            None => h,
        }
    }
}
