//! Sparse symmetric matrices and a direct SPD solver.
//!
//! The solver is an envelope (profile) Cholesky factorization combined with a
//! reverse Cuthill–McKee reordering. Mesh Laplacians have small envelopes
//! under RCM, and the factorization is exact, so heat solves and shift-invert
//! eigen iterations need no tolerance tuning.

use ndarray::Array2;

use crate::error::{CoreError, Result};

/// Symmetric sparse matrix in CSR form. Both triangles are stored so that
/// matrix-vector products are a plain row sweep.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    /// Only entries with `row >= col` need to be supplied, but supplying both
    /// triangles is accepted (each unordered pair must then be consistent,
    /// which holds for sums of symmetric element matrices).
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        use std::collections::BTreeMap;
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, v) in triplets {
            assert!(i < n && j < n, "triplet index out of range");
            *rows[i].entry(j).or_insert(0.0) += v;
            if i != j {
                *rows[j].entry(i).or_insert(0.0) += v;
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for (&j, &v) in row {
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseSym {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&j, &v)| (j, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// Y = A X, applied column-wise to an n-by-c matrix.
    pub fn mul_mat(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n);
        let c = x.ncols();
        let mut y = Array2::zeros((self.n, c));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                for k in 0..c {
                    y[(i, k)] += v * x[(j, k)];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                a[(i, j)] = v;
            }
        }
        a
    }

    /// Maximum absolute asymmetry |A - A^T|; zero for exact assembly.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// A + diag(d), keeping the sparsity pattern plus the diagonal.
    pub fn add_diag(&self, d: &[f64]) -> SparseSym {
        assert_eq!(d.len(), self.n);
        let mut triplets = Vec::with_capacity(self.nnz() / 2 + self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j < i {
                    triplets.push((i, j, v));
                } else if j == i {
                    triplets.push((i, i, v + d[i]));
                }
            }
        }
        // rows whose diagonal was absent from the pattern
        let mut seen_diag = vec![false; self.n];
        for &(i, j, _) in &triplets {
            if i == j {
                seen_diag[i] = true;
            }
        }
        for i in 0..self.n {
            if !seen_diag[i] {
                triplets.push((i, i, d[i]));
            }
        }
        SparseSym::from_triplets(self.n, &triplets)
    }

    /// A scaled by a constant.
    pub fn scaled(&self, s: f64) -> SparseSym {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= s;
        }
        out
    }
}

/// Reverse Cuthill–McKee ordering. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparseSym) -> Vec<usize> {
    let n = a.n();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    // Process each connected component from a pseudo-peripheral start.
    loop {
        let start = match (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)) {
            Some(s) => s,
            None => break,
        };
        let start = pseudo_peripheral(a, start, &degree);
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = a
                .row(u)
                .filter(|&(j, _)| j != u && !visited[j])
                .map(|(j, _)| j)
                .collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &SparseSym, start: usize, degree: &[usize]) -> usize {
    let mut u = start;
    let mut last_ecc = 0usize;
    for _ in 0..4 {
        let (far, ecc) = bfs_farthest(a, u, degree);
        if ecc <= last_ecc {
            break;
        }
        last_ecc = ecc;
        u = far;
    }
    u
}

fn bfs_farthest(a: &SparseSym, start: usize, degree: &[usize]) -> (usize, usize) {
    let n = a.n();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    dist[start] = 0;
    queue.push_back(start);
    let mut far = start;
    let mut ecc = 0;
    while let Some(u) = queue.pop_front() {
        for (j, _) in a.row(u) {
            if j != u && dist[j] == usize::MAX {
                dist[j] = dist[u] + 1;
                if dist[j] > ecc || (dist[j] == ecc && degree[j] < degree[far]) {
                    ecc = dist[j];
                    far = j;
                }
                queue.push_back(j);
            }
        }
    }
    (far, ecc)
}

/// Envelope Cholesky factorization of an SPD matrix, with RCM reordering.
pub struct CholeskySolver {
    n: usize,
    perm: Vec<usize>,     // perm[new] = old
    first: Vec<usize>,    // first stored column of each factor row
    offsets: Vec<usize>,  // start of each row in `env`
    env: Vec<f64>,        // strictly-lower envelope entries, row-major
    diag: Vec<f64>,       // L diagonal
}

impl CholeskySolver {
    pub fn new(a: &SparseSym) -> Result<Self> {
        let perm = reverse_cuthill_mckee(a);
        Self::with_permutation(a, perm)
    }

    pub fn with_permutation(a: &SparseSym, perm: Vec<usize>) -> Result<Self> {
        let n = a.n();
        assert_eq!(perm.len(), n);
        let mut inv_perm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }

        // Envelope: row i spans columns first[i]..=i in the permuted matrix.
        let mut first: Vec<usize> = (0..n).collect();
        for old_i in 0..n {
            let ni = inv_perm[old_i];
            for (old_j, _) in a.row(old_i) {
                let nj = inv_perm[old_j];
                if nj < ni && nj < first[ni] {
                    first[ni] = nj;
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            let width = i - first[i];
            offsets.push(offsets[i] + width);
        }
        let mut env = vec![0.0; offsets[n]];
        let mut diag = vec![0.0; n];

        // Scatter A into the envelope (permuted).
        for old_i in 0..n {
            let ni = inv_perm[old_i];
            for (old_j, v) in a.row(old_i) {
                let nj = inv_perm[old_j];
                if nj == ni {
                    diag[ni] = v;
                } else if nj < ni {
                    env[offsets[ni] + (nj - first[ni])] = v;
                }
            }
        }

        // Row-wise factorization within the envelope.
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut sum = env[offsets[i] + (j - fi)];
                for k in lo..j {
                    sum -= env[offsets[i] + (k - fi)] * env[offsets[j] + (k - fj)];
                }
                if diag[j] == 0.0 {
                    return Err(CoreError::Numerical(
                        "cholesky: zero pivot during factorization".into(),
                    ));
                }
                env[offsets[i] + (j - fi)] = sum / diag[j];
            }
            let mut sum = diag[i];
            for k in fi..i {
                let l = env[offsets[i] + (k - fi)];
                sum -= l * l;
            }
            if sum <= 0.0 || !sum.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "cholesky: matrix not positive definite at pivot {i} (value {sum:.3e})"
                )));
            }
            diag[i] = sum.sqrt();
        }

        Ok(CholeskySolver {
            n,
            perm,
            first,
            offsets,
            env,
            diag,
        })
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = b[self.perm[i]];
        }
        // forward: L y = Pb
        for i in 0..n {
            let fi = self.first[i];
            let mut sum = y[i];
            for k in fi..i {
                sum -= self.env[self.offsets[i] + (k - fi)] * y[k];
            }
            y[i] = sum / self.diag[i];
        }
        // backward: L^T z = y
        for i in (0..n).rev() {
            y[i] /= self.diag[i];
            let fi = self.first[i];
            let xi = y[i];
            for k in fi..i {
                y[k] -= self.env[self.offsets[i] + (k - fi)] * xi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Solve A X = B column-wise for an n-by-c right-hand side.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        assert_eq!(b.nrows(), self.n);
        let c = b.ncols();
        let mut out = Array2::zeros((self.n, c));
        let mut col = vec![0.0; self.n];
        for k in 0..c {
            for i in 0..self.n {
                col[i] = b[(i, k)];
            }
            let x = self.solve(&col);
            for i in 0..self.n {
                out[(i, k)] = x[i];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> (SparseSym, Array2<f64>) {
        let mut rng = crate::rng::stream(seed, "spd");
        let mut triplets = Vec::new();
        let mut dense = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            // a few random off-diagonals below i
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                if j < i {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    triplets.push((i, j, v));
                    dense[(i, j)] += v;
                    dense[(j, i)] += v;
                }
            }
        }
        for i in 0..n {
            // diagonally dominant => SPD
            let row_abs: f64 = (0..n).map(|j| dense[(i, j)].abs()).sum();
            let d = row_abs + 1.0 + rng.gen_range(0.0..1.0);
            triplets.push((i, i, d));
            dense[(i, i)] = d;
        }
        (SparseSym::from_triplets(n, &triplets), dense)
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        for seed in 0..5u64 {
            let n = 60;
            let (sp, dense) = random_spd(n, seed);
            let solver = CholeskySolver::new(&sp).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = solver.solve(&b);
            // residual check
            let ax = sp.mul_vec(&x);
            let res: f64 = ax
                .iter()
                .zip(&b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let bnorm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(res / bnorm < 1e-11, "seed {seed}: residual {res}");
            // compare against nalgebra dense solve
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| dense[(i, j)]);
            let nb = nalgebra::DVector::from_vec(b.clone());
            let nx = na.cholesky().unwrap().solve(&nb);
            for i in 0..n {
                assert!((x[i] - nx[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let (sp, _) = random_spd(40, 3);
        let perm = reverse_cuthill_mckee(&sp);
        let mut seen = vec![false; 40];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let sp = SparseSym::from_triplets(2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(CholeskySolver::new(&sp).is_err());
    }

    #[test]
    fn spmv_matches_dense() {
        let (sp, dense) = random_spd(30, 9);
        let x: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let y = sp.mul_vec(&x);
        for i in 0..30 {
            let want: f64 = (0..30).map(|j| dense[(i, j)] * x[j]).sum();
            assert!((y[i] - want).abs() < 1e-12);
        }
    }
}
