//! Content-addressed cache for expensive per-mesh and per-audio
//! precomputations, rooted at the `FREETALK_CACHE` environment variable
//! (disabled when unset).

use std::path::PathBuf;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::data::packed;
use crate::mesh::spectral::SpectralBasis;

pub const CACHE_ENV: &str = "FREETALK_CACHE";

pub struct Cache {
    root: Option<PathBuf>,
}

impl Cache {
    pub fn from_env() -> Cache {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) => Cache::at(PathBuf::from(dir)),
            None => Cache::disabled(),
        }
    }

    pub fn at(dir: PathBuf) -> Cache {
        let _ = std::fs::create_dir_all(&dir);
        Cache { root: Some(dir) }
    }

    pub fn disabled() -> Cache {
        Cache { root: None }
    }

    pub fn enabled(&self) -> bool {
        self.root.is_some()
    }

    fn path(&self, key: &str, suffix: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(format!("{key}.{suffix}")))
    }

    pub fn get_matrix(&self, key: &str, suffix: &str) -> Option<(Array2<f64>, f64)> {
        let path = self.path(key, suffix)?;
        if !path.exists() {
            return None;
        }
        packed::read_matrix_f64(&path).ok()
    }

    pub fn put_matrix(&self, key: &str, suffix: &str, mat: &Array2<f64>, rate: f64) {
        if let Some(path) = self.path(key, suffix) {
            // cache writes are best-effort; f64 so cached == recomputed
            let _ = packed::write_matrix_f64(&path, mat, rate);
        }
    }

    /// Spectral bases are stored as two matrices: eigenvalues (k-by-1) and
    /// the basis (n-by-k).
    pub fn get_spectral(&self, key: &str) -> Option<SpectralBasis> {
        let (evals, _) = self.get_matrix(key, "evals.ftf")?;
        let (basis, _) = self.get_matrix(key, "basis.ftf")?;
        if evals.ncols() != 1 || basis.ncols() != evals.nrows() {
            return None;
        }
        Some(SpectralBasis {
            eigenvalues: evals.column(0).to_vec(),
            basis,
        })
    }

    pub fn put_spectral(&self, key: &str, basis: &SpectralBasis) {
        let evals = Array2::from_shape_fn((basis.eigenvalues.len(), 1), |(i, _)| {
            basis.eigenvalues[i]
        });
        self.put_matrix(key, "evals.ftf", &evals, 0.0);
        self.put_matrix(key, "basis.ftf", &basis.basis, 0.0);
    }
}

/// Hex digest of concatenated byte slices, used as cache keys.
pub fn content_key(label: &str, parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16 + label.len() + 1);
    out.push_str(label);
    out.push('-');
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_label_and_content() {
        let a = content_key("mesh", &[b"abc"]);
        let b = content_key("mesh", &[b"abd"]);
        let c = content_key("feat", &[b"abc"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, content_key("mesh", &[b"abc"]));
    }

    #[test]
    fn spectral_cache_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::at(dir.path().to_path_buf());
        assert!(cache.enabled());
        let basis = SpectralBasis {
            eigenvalues: vec![0.0, 0.5, 1.25],
            basis: Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.25),
        };
        cache.put_spectral("k1", &basis);
        let back = cache.get_spectral("k1").unwrap();
        assert_eq!(back.eigenvalues, basis.eigenvalues);
        assert_eq!(back.basis, basis.basis);
        assert!(cache.get_spectral("k2").is_none());
    }
}
