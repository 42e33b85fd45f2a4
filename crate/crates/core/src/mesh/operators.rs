//! Discrete differential operators on triangle meshes: area-weighted vertex
//! normals, the cotangent Laplacian, and the barycentric lumped mass matrix.

use ndarray::Array2;

use crate::error::Result;
use crate::mesh::sparse::SparseSym;
use crate::mesh::spectral::{self, SpectralBasis};
use crate::mesh::{cross3, dot3, norm3, sub3, Mesh};

/// Fallback normal for vertices whose incident faces all have zero area
/// (or that have no incident face at all).
pub const NORMAL_FALLBACK: [f64; 3] = [0.0, 0.0, 1.0];

/// Immutable bundle of per-mesh operators.
///
/// `laplacian` is the cotangent stiffness matrix: off-diagonal
/// `L_ij = -(cot a_ij + cot b_ij) / 2` for each edge ij, diagonal minus the
/// row sum; it is symmetric positive semidefinite with zero row sums. `mass`
/// is the barycentric lumped (diagonal) mass matrix.
pub struct SurfaceOperators {
    pub laplacian: SparseSym,
    pub mass: Vec<f64>,
    pub normals: Array2<f64>,
    pub spectral: Option<SpectralBasis>,
    pub warnings: Vec<String>,
    pub mean_edge_length: f64,
}

impl SurfaceOperators {
    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Area-weighted average of incident face normals, normalized per vertex.
pub fn compute_vertex_normals(mesh: &Mesh) -> Array2<f64> {
    let n = mesh.n_vertices();
    let mut acc = Array2::<f64>::zeros((n, 3));
    for f in mesh.faces() {
        let [a, b, c] = *f;
        let pa = mesh.vertex(a);
        let pb = mesh.vertex(b);
        let pc = mesh.vertex(c);
        // cross product length = 2*area, so this accumulates area-weighted normals
        let fnorm = cross3(sub3(pb, pa), sub3(pc, pa));
        for &v in f {
            acc[(v, 0)] += fnorm[0];
            acc[(v, 1)] += fnorm[1];
            acc[(v, 2)] += fnorm[2];
        }
    }
    for i in 0..n {
        let v = [acc[(i, 0)], acc[(i, 1)], acc[(i, 2)]];
        let len = norm3(v);
        if len < 1e-14 {
            acc[(i, 0)] = NORMAL_FALLBACK[0];
            acc[(i, 1)] = NORMAL_FALLBACK[1];
            acc[(i, 2)] = NORMAL_FALLBACK[2];
        } else {
            acc[(i, 0)] /= len;
            acc[(i, 1)] /= len;
            acc[(i, 2)] /= len;
        }
    }
    acc
}

/// Assemble the cotan Laplacian and lumped mass; optionally compute the `k`
/// smallest generalized eigenpairs `L phi = lambda M phi`.
///
/// Non-manifold input is not rejected: operators are assembled as usual and
/// the condition is reported through `warnings`.
pub fn build_operators(mesh: &Mesh, spectral_k: Option<usize>) -> Result<SurfaceOperators> {
    let n = mesh.n_vertices();
    let mut warnings = Vec::new();

    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(mesh.n_faces() * 6);
    let mut mass = vec![0.0f64; n];
    let mut degenerate_faces = 0usize;
    for f in mesh.faces() {
        let [a, b, c] = *f;
        let pa = mesh.vertex(a);
        let pb = mesh.vertex(b);
        let pc = mesh.vertex(c);
        let cross = cross3(sub3(pb, pa), sub3(pc, pa));
        let double_area = norm3(cross);
        if double_area < 1e-14 {
            degenerate_faces += 1;
            continue;
        }
        let area = 0.5 * double_area;
        for &v in f {
            mass[v] += area / 3.0;
        }
        // one cotangent per corner, weighting the opposite edge
        let corners = [(a, b, c), (b, c, a), (c, a, b)];
        for (apex, e0, e1) in corners {
            let p_apex = mesh.vertex(apex);
            let u = sub3(mesh.vertex(e0), p_apex);
            let v = sub3(mesh.vertex(e1), p_apex);
            let cot = dot3(u, v) / norm3(cross3(u, v)).max(1e-300);
            let w = 0.5 * cot;
            // off-diagonal -w on edge (e0, e1), +w on both diagonals
            triplets.push((e0.max(e1), e0.min(e1), -w));
            triplets.push((e0, e0, w));
            triplets.push((e1, e1, w));
        }
    }
    if degenerate_faces > 0 {
        warnings.push(format!(
            "{degenerate_faces} zero-area face(s) skipped during assembly"
        ));
    }

    // keep the mass matrix strictly positive for isolated / zero-area stars
    let positive: Vec<f64> = mass.iter().copied().filter(|&m| m > 0.0).collect();
    let floor = if positive.is_empty() {
        1e-12
    } else {
        1e-10 * positive.iter().sum::<f64>() / positive.len() as f64
    };
    let mut floored = 0usize;
    for m in &mut mass {
        if *m <= 0.0 {
            *m = floor;
            floored += 1;
        }
    }
    if floored > 0 {
        warnings.push(format!(
            "{floored} vertex(es) with empty star: mass floored to {floor:.3e}"
        ));
    }

    check_manifold(mesh, &mut warnings);

    let laplacian = SparseSym::from_triplets(n, &triplets);
    let normals = compute_vertex_normals(mesh);
    let spectral = match spectral_k {
        Some(k) if k > 0 => Some(spectral::smallest_eigenpairs(&laplacian, &mass, k.min(n))?),
        _ => None,
    };

    Ok(SurfaceOperators {
        laplacian,
        mass,
        normals,
        spectral,
        warnings,
        mean_edge_length: mesh.mean_edge_length(),
    })
}

fn check_manifold(mesh: &Mesh, warnings: &mut Vec<String>) {
    let mut edge_count: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for f in mesh.faces() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    let over = edge_count.values().filter(|&&c| c > 2).count();
    if over > 0 {
        warnings.push(format!(
            "non-manifold input: {over} edge(s) shared by more than two faces"
        ));
    }
    let mut incident = vec![false; mesh.n_vertices()];
    for f in mesh.faces() {
        for &v in f {
            incident[v] = true;
        }
    }
    let isolated = incident.iter().filter(|&&b| !b).count();
    if isolated > 0 {
        warnings.push(format!("{isolated} isolated vertex(es)"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn equilateral() -> Mesh {
        // unit edge length
        Mesh::new(
            array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.5, 3f64.sqrt() / 2.0, 0.0]
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn equilateral_cotan_weights() {
        // cot 60 deg = 1/sqrt(3); off-diagonal = -1/(2 sqrt(3)), diagonal = 1/sqrt(3)
        let ops = build_operators(&equilateral(), None).unwrap();
        let w = -1.0 / (2.0 * 3f64.sqrt());
        for i in 0..3 {
            for j in 0..3 {
                let got = ops.laplacian.get(i, j);
                let want = if i == j { 1.0 / 3f64.sqrt() } else { w };
                assert!((got - want).abs() < 1e-12, "L[{i}{j}] = {got}, want {want}");
            }
        }
    }

    #[test]
    fn row_sums_vanish_and_matrix_is_symmetric() {
        let mesh = equilateral().subdivide_midpoint().subdivide_midpoint();
        let ops = build_operators(&mesh, None).unwrap();
        let ones = vec![1.0; mesh.n_vertices()];
        for (i, r) in ops.laplacian.mul_vec(&ones).iter().enumerate() {
            assert!(r.abs() < 1e-8, "row {i} sums to {r}");
        }
        assert!(ops.laplacian.max_asymmetry() < 1e-10);
    }

    #[test]
    fn flat_square_normals_point_up() {
        let mesh = Mesh::new(
            array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0]
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let normals = compute_vertex_normals(&mesh);
        for i in 0..4 {
            assert!((normals[(i, 0)]).abs() < 1e-12);
            assert!((normals[(i, 1)]).abs() < 1e-12);
            assert!((normals[(i, 2)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_vertex_gets_fallback_normal_and_positive_mass() {
        let mesh = Mesh::new(
            array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 5.0, 5.0]
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let ops = build_operators(&mesh, None).unwrap();
        assert_eq!(
            [ops.normals[(3, 0)], ops.normals[(3, 1)], ops.normals[(3, 2)]],
            NORMAL_FALLBACK
        );
        assert!(ops.mass.iter().all(|&m| m > 0.0));
        assert!(ops.warnings.iter().any(|w| w.contains("isolated")));
    }

    #[test]
    fn linear_function_is_in_the_kernel_on_interior_of_flat_grid() {
        // regular grid in the plane; cotan Laplacian reproduces linear functions
        // exactly on interior vertices
        let rows = 9;
        let cols = 9;
        let mut verts = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                verts.push([c as f64, r as f64, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let i = r * cols + c;
                faces.push([i, i + 1, i + cols]);
                faces.push([i + 1, i + cols + 1, i + cols]);
            }
        }
        let mut arr = Array2::zeros((verts.len(), 3));
        for (i, v) in verts.iter().enumerate() {
            for k in 0..3 {
                arr[(i, k)] = v[k];
            }
        }
        let mesh = Mesh::new(arr, faces).unwrap();
        let ops = build_operators(&mesh, None).unwrap();
        let u: Vec<f64> = (0..mesh.n_vertices()).map(|i| mesh.vertex(i)[0]).collect();
        let lu = ops.laplacian.mul_vec(&u);
        let umax = u.iter().fold(0f64, |a, &b| a.max(b.abs()));
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let i = r * cols + c;
                assert!(
                    lu[i].abs() / umax < 1e-6,
                    "interior vertex {i}: |Lu| = {}",
                    lu[i].abs()
                );
            }
        }
    }

    #[test]
    fn non_manifold_edge_is_flagged_but_assembled() {
        let mesh = Mesh::new(
            array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.5, 1.0, 0.0],
                [0.5, -1.0, 0.0],
                [0.5, 0.0, 1.0]
            ],
            vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]],
        )
        .unwrap();
        let ops = build_operators(&mesh, None).unwrap();
        assert!(ops.warnings.iter().any(|w| w.contains("non-manifold")));
        assert!(ops.laplacian.nnz() > 0);
    }
}
