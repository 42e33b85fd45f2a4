//! Procedural meshes used by the synthetic data generator and the tests.

use ndarray::Array2;

use crate::mesh::Mesh;

/// Unit icosphere: icosahedron subdivided `level` times and projected to the
/// sphere. Vertex counts: 12, 42, 162, 642, 2562, ...
pub fn icosphere(level: usize) -> Mesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut verts {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        *v = [v[0] / len, v[1] / len, v[2] / len];
    }
    let faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut mesh = Mesh::new(to_array(&verts), faces).unwrap();
    for _ in 0..level {
        mesh = mesh.subdivide_midpoint();
        mesh = project_to_unit_sphere(&mesh);
    }
    mesh
}

/// UV sphere with `rows` latitude bands and `cols` longitudes
/// (`rows*cols + 2` vertices including the two poles).
pub fn uv_sphere(rows: usize, cols: usize) -> Mesh {
    assert!(rows >= 2 && cols >= 3);
    let mut verts: Vec<[f64; 3]> = Vec::with_capacity(rows * cols + 2);
    verts.push([0.0, 1.0, 0.0]); // north pole
    for r in 0..rows {
        let theta = std::f64::consts::PI * (r + 1) as f64 / (rows + 1) as f64;
        for c in 0..cols {
            let phi = 2.0 * std::f64::consts::PI * c as f64 / cols as f64;
            verts.push([
                theta.sin() * phi.cos(),
                theta.cos(),
                theta.sin() * phi.sin(),
            ]);
        }
    }
    verts.push([0.0, -1.0, 0.0]); // south pole
    let south = verts.len() - 1;
    let ring = |r: usize, c: usize| 1 + r * cols + (c % cols);

    let mut faces = Vec::new();
    for c in 0..cols {
        faces.push([0, ring(0, c + 1), ring(0, c)]);
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            let a = ring(r, c);
            let b = ring(r, c + 1);
            let d = ring(r + 1, c);
            let e = ring(r + 1, c + 1);
            faces.push([a, b, d]);
            faces.push([b, e, d]);
        }
    }
    for c in 0..cols {
        faces.push([south, ring(rows - 1, c), ring(rows - 1, c + 1)]);
    }
    Mesh::new(to_array(&verts), faces).unwrap()
}

/// Icosphere with deterministic smooth radial bumps; breaks the sphere's
/// eigenvalue multiplicities, which matters for spectral tests.
pub fn bumpy_sphere(level: usize, amplitude: f64, seed: u64) -> Mesh {
    let mesh = icosphere(level);
    let mut rng = crate::rng::stream(seed, "bumpy-sphere");
    let mut lobes = Vec::new();
    for _ in 0..6 {
        let dir = random_unit(&mut rng);
        let strength: f64 = rand::Rng::gen_range(&mut rng, 0.3..1.0);
        let width: f64 = rand::Rng::gen_range(&mut rng, 2.0..6.0);
        lobes.push((dir, strength, width));
    }
    let n = mesh.n_vertices();
    let mut verts = Array2::zeros((n, 3));
    for i in 0..n {
        let p = mesh.vertex(i);
        let mut radius = 1.0;
        for (dir, strength, width) in &lobes {
            let cosang = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
            radius += amplitude * strength * ((cosang - 1.0) * width).exp();
        }
        for k in 0..3 {
            verts[(i, k)] = p[k] * radius;
        }
    }
    mesh.with_vertices(verts).unwrap()
}

/// Scale a mesh by per-axis factors (ellipsoids from spheres).
pub fn scale_axes(mesh: &Mesh, sx: f64, sy: f64, sz: f64) -> Mesh {
    let n = mesh.n_vertices();
    let mut verts = mesh.vertices().clone();
    for i in 0..n {
        verts[(i, 0)] *= sx;
        verts[(i, 1)] *= sy;
        verts[(i, 2)] *= sz;
    }
    mesh.with_vertices(verts).unwrap()
}

fn project_to_unit_sphere(mesh: &Mesh) -> Mesh {
    let n = mesh.n_vertices();
    let mut verts = mesh.vertices().clone();
    for i in 0..n {
        let p = mesh.vertex(i);
        let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        for k in 0..3 {
            verts[(i, k)] = p[k] / len;
        }
    }
    mesh.with_vertices(verts).unwrap()
}

fn random_unit(rng: &mut impl rand::Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let len2: f64 = v.iter().map(|x| x * x).sum();
        if len2 > 1e-6 && len2 < 1.0 {
            let len = len2.sqrt();
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

fn to_array(verts: &[[f64; 3]]) -> Array2<f64> {
    let mut arr = Array2::zeros((verts.len(), 3));
    for (i, v) in verts.iter().enumerate() {
        for k in 0..3 {
            arr[(i, k)] = v[k];
        }
    }
    arr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_vertex_counts() {
        assert_eq!(icosphere(0).n_vertices(), 12);
        assert_eq!(icosphere(1).n_vertices(), 42);
        assert_eq!(icosphere(2).n_vertices(), 162);
        assert_eq!(icosphere(3).n_vertices(), 642);
    }

    #[test]
    fn icosphere_normals_are_radial() {
        let mesh = icosphere(3);
        let normals = crate::mesh::operators::compute_vertex_normals(&mesh);
        let cos_5deg = 5f64.to_radians().cos();
        for i in 0..mesh.n_vertices() {
            let p = mesh.vertex(i); // unit radius, so p is the radial direction
            let dot = p[0] * normals[(i, 0)] + p[1] * normals[(i, 1)] + p[2] * normals[(i, 2)];
            assert!(dot > cos_5deg, "vertex {i}: angle to radial too large");
        }
    }

    #[test]
    fn uv_sphere_counts_and_validity() {
        let mesh = uv_sphere(30, 50);
        assert_eq!(mesh.n_vertices(), 30 * 50 + 2);
        // closed surface: every edge shared by exactly two faces
        let ops = crate::mesh::operators::build_operators(&mesh, None).unwrap();
        assert!(
            !ops.warnings.iter().any(|w| w.contains("non-manifold")),
            "{:?}",
            ops.warnings
        );
    }
}
