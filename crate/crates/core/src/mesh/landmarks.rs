//! Landmark anchoring on arbitrary triangulations.
//!
//! A landmark spec pins N semantic keypoints to a mesh family, either as
//! vertex indices or as (face, barycentric) pairs, and names vertex-index
//! region masks used by the evaluation metrics. Specs live in JSON sidecar
//! files, one per mesh family.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mesh::Mesh;

pub const DEFAULT_LANDMARK_COUNT: usize = 68;

/// One landmark anchor on a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Anchor {
    Vertex { vertex: usize },
    Barycentric { face: usize, bary: [f64; 3] },
}

/// Landmark anchors plus named vertex-region masks for one mesh family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub regions: BTreeMap<String, Vec<usize>>,
}

impl LandmarkSpec {
    pub fn n_landmarks(&self) -> usize {
        self.anchors.len()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LandmarkSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let spec: LandmarkSpec = serde_json::from_str(&text)
            .map_err(|e| CoreError::parse(path, format!("landmark spec: {e}")))?;
        spec.validate_shape()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
            }
        }
        let text = serde_json::to_string_pretty(self).expect("landmark spec serializes");
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    fn validate_shape(&self) -> Result<()> {
        for (i, anchor) in self.anchors.iter().enumerate() {
            if let Anchor::Barycentric { bary, .. } = anchor {
                let sum: f64 = bary.iter().sum();
                if bary.iter().any(|&b| b < -1e-12) || (sum - 1.0).abs() > 1e-9 {
                    return Err(CoreError::Validation(format!(
                        "anchor {i}: barycentric coordinates must be nonnegative and sum to 1 (got {bary:?})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Check anchors and regions against a concrete mesh.
    pub fn validate_for(&self, mesh: &Mesh) -> Result<()> {
        self.validate_shape()?;
        let n = mesh.n_vertices();
        let m = mesh.n_faces();
        for (i, anchor) in self.anchors.iter().enumerate() {
            match *anchor {
                Anchor::Vertex { vertex } => {
                    if vertex >= n {
                        return Err(CoreError::Validation(format!(
                            "anchor {i}: vertex {vertex} out of range (n = {n})"
                        )));
                    }
                }
                Anchor::Barycentric { face, .. } => {
                    if face >= m {
                        return Err(CoreError::Validation(format!(
                            "anchor {i}: face {face} out of range (m = {m})"
                        )));
                    }
                }
            }
        }
        for (name, verts) in &self.regions {
            if let Some(&bad) = verts.iter().find(|&&v| v >= n) {
                return Err(CoreError::Validation(format!(
                    "region {name:?}: vertex {bad} out of range (n = {n})"
                )));
            }
        }
        Ok(())
    }

    pub fn region(&self, name: &str) -> Result<&[usize]> {
        self.regions
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| CoreError::Validation(format!("missing region mask {name:?}")))
    }
}

/// Landmark positions extracted from one mesh state (N-by-3, mesh units).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub positions: Array2<f64>,
}

impl LandmarkSet {
    pub fn n(&self) -> usize {
        self.positions.nrows()
    }
}

/// Evaluate anchors against vertex positions. Linear in the vertex array.
pub fn extract_landmarks(mesh: &Mesh, spec: &LandmarkSpec) -> Result<LandmarkSet> {
    spec.validate_for(mesh)?;
    Ok(extract_from_positions(mesh.vertices(), mesh.faces(), spec))
}

/// Anchor evaluation for an arbitrary vertex array sharing the mesh
/// connectivity (used for per-frame vertex trajectories).
pub fn extract_from_positions(
    vertices: &Array2<f64>,
    faces: &[[usize; 3]],
    spec: &LandmarkSpec,
) -> LandmarkSet {
    let mut out = Array2::zeros((spec.anchors.len(), 3));
    for (row, anchor) in spec.anchors.iter().enumerate() {
        match *anchor {
            Anchor::Vertex { vertex } => {
                for k in 0..3 {
                    out[(row, k)] = vertices[(vertex, k)];
                }
            }
            Anchor::Barycentric { face, bary } => {
                let f = faces[face];
                for k in 0..3 {
                    out[(row, k)] = bary[0] * vertices[(f[0], k)]
                        + bary[1] * vertices[(f[1], k)]
                        + bary[2] * vertices[(f[2], k)];
                }
            }
        }
    }
    LandmarkSet { positions: out }
}

/// Fixed undirected graph over landmark ids.
#[derive(Debug, Clone)]
pub struct LandmarkGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl LandmarkGraph {
    pub fn new(n_nodes: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        for e in &mut edges {
            if e.0 == e.1 {
                return Err(CoreError::Validation(format!("self-loop at node {}", e.0)));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.1 >= n_nodes {
                return Err(CoreError::Validation(format!(
                    "edge ({}, {}) out of range",
                    e.0, e.1
                )));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let graph = LandmarkGraph { n_nodes, edges };
        let deg = graph.degrees();
        if let Some(lonely) = deg.iter().position(|&d| d == 0) {
            return Err(CoreError::Validation(format!(
                "node {lonely} appears in no edge"
            )));
        }
        Ok(graph)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_nodes];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Symmetric-normalized adjacency with self-loops,
    /// `D^{-1/2} (A + I) D^{-1/2}`, as a dense matrix (N is small).
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        let n = self.n_nodes;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            a[(i, i)] = 1.0;
        }
        for &(u, v) in &self.edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        for i in 0..n {
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    a[(i, j)] /= (deg[i] * deg[j]).sqrt();
                }
            }
        }
        a
    }
}

/// The standard 68-point facial-landmark connectivity: open chains for the
/// jaw (0-16), eyebrows (17-21, 22-26), nose bridge (27-30) and nostrils
/// (31-35); closed loops for the eyes (36-41, 42-47), outer lips (48-59) and
/// inner lips (60-67).
pub fn default_landmark_graph() -> LandmarkGraph {
    let mut edges = Vec::new();
    let chain = |edges: &mut Vec<(usize, usize)>, lo: usize, hi: usize| {
        for i in lo..hi {
            edges.push((i, i + 1));
        }
    };
    let ring = |edges: &mut Vec<(usize, usize)>, lo: usize, hi: usize| {
        for i in lo..hi {
            edges.push((i, i + 1));
        }
        edges.push((hi, lo));
    };
    chain(&mut edges, 0, 16); // jaw
    chain(&mut edges, 17, 21); // right eyebrow
    chain(&mut edges, 22, 26); // left eyebrow
    chain(&mut edges, 27, 30); // nose bridge
    chain(&mut edges, 31, 35); // nostrils
    ring(&mut edges, 36, 41); // right eye
    ring(&mut edges, 42, 47); // left eye
    ring(&mut edges, 48, 59); // outer lips
    ring(&mut edges, 60, 67); // inner lips
    LandmarkGraph::new(DEFAULT_LANDMARK_COUNT, edges).expect("static graph is valid")
}

/// Landmark ids conventionally treated as the mouth region (outer + inner lips).
pub fn mouth_landmark_ids() -> Vec<usize> {
    (48..68).collect()
}

/// Landmark ids in the upper face (eyebrows, nose bridge, eyes).
pub fn upper_face_landmark_ids() -> Vec<usize> {
    (17..31).chain(36..48).collect()
}
