//! Sequence bundles: the dataset unit pairing audio with a template mesh, a
//! landmark spec, an affect label, and per-frame landmark positions and/or
//! dense vertex frames. A dataset directory holds a `manifest.json` plus one
//! subdirectory per sequence.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ats::EmotionVocab;
use crate::data::packed;
use crate::error::{CoreError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Global per-axis standardization scales for landmark displacements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub landmark_disp_std: [f64; 3],
}

impl NormStats {
    /// Divide each coordinate column by its axis std (columns are x,y,z
    /// repeating in landmark-major order).
    pub fn normalize(&self, frames: &Array2<f64>) -> Array2<f64> {
        self.scale(frames, false)
    }

    pub fn denormalize(&self, frames: &Array2<f64>) -> Array2<f64> {
        self.scale(frames, true)
    }

    fn scale(&self, frames: &Array2<f64>, invert: bool) -> Array2<f64> {
        let mut out = frames.clone();
        for ((_, j), v) in out.indexed_iter_mut() {
            let s = self.landmark_disp_std[j % 3].max(1e-12);
            if invert {
                *v *= s;
            } else {
                *v /= s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantEntry {
    /// Midpoint-subdivision level relative to the base mesh.
    pub level: usize,
    pub mesh: String,
    pub landmarks: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: usize,
    pub mesh: String,
    pub landmarks: String,
    #[serde(default)]
    pub variants: Vec<VariantEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub identity: usize,
    pub emotion: String,
    pub intensity: u32,
    pub duration: f64,
    pub split: String,
    pub has_dense: bool,
    #[serde(default)]
    pub dense_variants: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    pub fps: f64,
    pub n_landmarks: usize,
    pub vocab: EmotionVocab,
    pub norm_stats: NormStats,
    pub identities: Vec<IdentityEntry>,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Manifest> {
        let path = root.as_ref().join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CoreError::parse(&path, format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let path = root.as_ref().join(MANIFEST_NAME);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(&path, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps <= 0.0 {
            return Err(CoreError::Validation("manifest fps must be positive".into()));
        }
        for s in &self.sequences {
            if !self.identities.iter().any(|i| i.id == s.identity) {
                return Err(CoreError::Validation(format!(
                    "sequence {} references unknown identity {}",
                    s.id, s.identity
                )));
            }
            self.vocab.label(&s.emotion, s.intensity)?;
        }
        Ok(())
    }

    pub fn identity(&self, id: usize) -> Result<&IdentityEntry> {
        self.identities
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| CoreError::Validation(format!("unknown identity {id}")))
    }

    pub fn split(&self, name: &str) -> Vec<&SequenceEntry> {
        self.sequences.iter().filter(|s| s.split == name).collect()
    }

    pub fn sequence_dir(root: &Path, id: &str) -> PathBuf {
        root.join("sequences").join(id)
    }
}

/// One sequence pulled off disk.
pub struct LoadedSequence {
    pub entry: SequenceEntry,
    pub audio_path: PathBuf,
    /// Per-frame landmark positions (N-by-3 each), if stored.
    pub landmark_positions: Option<Vec<Array2<f64>>>,
    /// Dense per-frame vertex positions with the sequence connectivity.
    pub dense: Option<packed::PackedSequence>,
    pub warnings: Vec<String>,
}

pub fn load_sequence(
    root: &Path,
    manifest: &Manifest,
    entry: &SequenceEntry,
    want_dense: bool,
) -> Result<LoadedSequence> {
    let dir = Manifest::sequence_dir(root, &entry.id);
    let audio_path = dir.join("audio.wav");
    if !audio_path.exists() {
        return Err(CoreError::Validation(format!(
            "sequence {}: missing {}",
            entry.id,
            audio_path.display()
        )));
    }
    let mut warnings = Vec::new();
    let lm_path = dir.join("landmarks.ftk");
    let mut landmark_positions = None;
    if lm_path.exists() {
        let seq = packed::read_sequence(&lm_path)?;
        if seq.n_points() != manifest.n_landmarks {
            return Err(CoreError::Validation(format!(
                "sequence {}: landmark file has {} points, manifest says {}",
                entry.id,
                seq.n_points(),
                manifest.n_landmarks
            )));
        }
        let expected = (entry.duration * manifest.fps).round() as usize;
        let t = seq.n_frames();
        if t.abs_diff(expected) > 1 {
            return Err(CoreError::Validation(format!(
                "sequence {}: {t} landmark frames vs {expected} expected from duration*fps",
                entry.id
            )));
        }
        if t != expected {
            warnings.push(format!(
                "sequence {}: frame count {t} != expected {expected}; truncating to min",
                entry.id
            ));
        }
        landmark_positions = Some(seq.frames);
    }
    let mut dense = None;
    if want_dense && entry.has_dense {
        let dense_path = dir.join("frames.ftk");
        if !dense_path.exists() {
            return Err(CoreError::Validation(format!(
                "sequence {}: manifest promises dense frames but {} is missing",
                entry.id,
                dense_path.display()
            )));
        }
        dense = Some(packed::read_sequence(&dense_path)?);
    }
    Ok(LoadedSequence {
        entry: entry.clone(),
        audio_path,
        landmark_positions,
        dense,
        warnings,
    })
}

/// Dense frames of a remesh variant (written only for selected splits).
pub fn load_variant_dense(
    root: &Path,
    entry: &SequenceEntry,
    level: usize,
) -> Result<packed::PackedSequence> {
    let dir = Manifest::sequence_dir(root, &entry.id);
    let path = dir.join(format!("frames_sub{level}.ftk"));
    packed::read_sequence(&path)
}

/// Per-axis std of landmark displacements across a set of displacement
/// trajectories (the normalization stored in the manifest).
pub fn displacement_std(trajectories: &[Vec<Array2<f64>>]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for traj in trajectories {
        for frame in traj {
            for row in frame.rows() {
                for c in 0..3 {
                    sums[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                count += 1;
            }
        }
    }
    let mut out = [0.0; 3];
    if count > 0 {
        for c in 0..3 {
            let mean = sums[c] / count as f64;
            out[c] = (sq[c] / count as f64 - mean * mean).max(0.0).sqrt();
        }
    }
    for v in &mut out {
        if *v < 1e-12 {
            *v = 1.0; // degenerate axis: leave unscaled
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_stats_roundtrip_by_axis() {
        let stats = NormStats {
            landmark_disp_std: [2.0, 4.0, 8.0],
        };
        let frames = Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as f64 + 1.0);
        let normed = stats.normalize(&frames);
        assert_eq!(normed[(0, 0)], frames[(0, 0)] / 2.0);
        assert_eq!(normed[(0, 1)], frames[(0, 1)] / 4.0);
        assert_eq!(normed[(0, 2)], frames[(0, 2)] / 8.0);
        assert_eq!(normed[(0, 3)], frames[(0, 3)] / 2.0);
        let back = stats.denormalize(&normed);
        for (a, b) in back.iter().zip(frames.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_std_of_known_data() {
        // displacements alternating +1/-1 on x only: std_x = 1
        let f1 = Array2::from_shape_fn((2, 3), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
        let f2 = Array2::from_shape_fn((2, 3), |(_, c)| if c == 0 { -1.0 } else { 0.0 });
        let std = displacement_std(&[vec![f1, f2]]);
        assert!((std[0] - 1.0).abs() < 1e-12);
        assert_eq!(std[1], 1.0); // degenerate axis floored to 1
        assert_eq!(std[2], 1.0);
    }

    #[test]
    fn manifest_validation_rejects_bad_references() {
        let vocab = EmotionVocab::new(vec!["neutral".into()], 1).unwrap();
        let manifest = Manifest {
            dataset_id: "t".into(),
            fps: 25.0,
            n_landmarks: 68,
            vocab,
            norm_stats: NormStats {
                landmark_disp_std: [1.0; 3],
            },
            identities: vec![],
            sequences: vec![SequenceEntry {
                id: "s".into(),
                identity: 0,
                emotion: "neutral".into(),
                intensity: 1,
                duration: 1.0,
                split: "train".into(),
                has_dense: false,
                dense_variants: vec![],
            }],
        };
        assert!(manifest.validate().is_err());
    }
}
