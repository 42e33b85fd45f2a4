//! Triangle meshes, file I/O, and discrete differential operators.

pub mod heat;
pub mod io;
pub mod landmarks;
pub mod operators;
pub mod primitives;
pub mod sparse;
pub mod spectral;

use ndarray::Array2;

use crate::error::{CoreError, Result};

/// A triangle mesh: vertex coordinates and 0-based face indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Array2<f64>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Array2<f64>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.nrows();
        if n < 3 {
            return Err(CoreError::Validation(format!(
                "mesh needs at least 3 vertices, got {n}"
            )));
        }
        if self.vertices.ncols() != 3 {
            return Err(CoreError::Validation(
                "vertex array must have 3 columns".into(),
            ));
        }
        if !self.vertices.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Validation("non-finite vertex coordinate".into()));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(CoreError::Validation(format!(
                        "face {fi} references vertex {v}, but mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(CoreError::Validation(format!(
                    "face {fi} is degenerate: repeated vertex index"
                )));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &Array2<f64> {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [self.vertices[(i, 0)], self.vertices[(i, 1)], self.vertices[(i, 2)]]
    }

    /// Replace vertex positions, keeping connectivity.
    pub fn with_vertices(&self, vertices: Array2<f64>) -> Result<Self> {
        if vertices.nrows() != self.n_vertices() {
            return Err(CoreError::Validation(format!(
                "vertex count changed: {} -> {}",
                self.n_vertices(),
                vertices.nrows()
            )));
        }
        Mesh::new(vertices, self.faces.clone())
    }

    /// Unordered edge list (each pair once, i < j).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = std::collections::BTreeSet::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| {
                let pa = self.vertex(a);
                let pb = self.vertex(b);
                dist3(pa, pb)
            })
            .sum();
        total / edges.len() as f64
    }

    /// Uniform 1-to-4 midpoint subdivision. Original vertices keep their
    /// indices; each edge gains one midpoint vertex.
    pub fn subdivide_midpoint(&self) -> Mesh {
        let n = self.n_vertices();
        let mut midpoint: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        let mut verts: Vec<[f64; 3]> = (0..n).map(|i| self.vertex(i)).collect();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let pa = verts[a];
                let pb = verts[b];
                verts.push([
                    0.5 * (pa[0] + pb[0]),
                    0.5 * (pa[1] + pb[1]),
                    0.5 * (pa[2] + pb[2]),
                ]);
                verts.len() - 1
            })
        };
        let mut faces = Vec::with_capacity(self.n_faces() * 4);
        for f in &self.faces {
            let [a, b, c] = *f;
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            faces.push([a, ab, ca]);
            faces.push([ab, b, bc]);
            faces.push([ca, bc, c]);
            faces.push([ab, bc, ca]);
        }
        let mut arr = Array2::zeros((verts.len(), 3));
        for (i, v) in verts.iter().enumerate() {
            arr[(i, 0)] = v[0];
            arr[(i, 1)] = v[1];
            arr[(i, 2)] = v[2];
        }
        Mesh::new(arr, faces).expect("subdivision preserves validity")
    }
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}
