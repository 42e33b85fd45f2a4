//! Audio-To-Sparse: conditional diffusion over landmark-displacement
//! trajectories, conditioned on frame-aligned audio features and an affect
//! label (emotion category + intensity).

pub mod denoiser;
pub mod loss;
pub mod sampler;
pub mod schedule;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::tape::Mat;

/// A landmark-displacement trajectory. Row `t` is the flattened displacement
/// frame `ΔL_t` in landmark-major order (x0, y0, z0, x1, ...), so the row
/// width is `D = 3N`. The static template is factored out and kept alongside.
#[derive(Debug, Clone)]
pub struct MotionSequence {
    pub frames: Mat,
    pub n_landmarks: usize,
    pub fps: f64,
    /// Neutral template landmark positions, N-by-3.
    pub template: Array2<f64>,
}

impl MotionSequence {
    pub fn new(frames: Mat, n_landmarks: usize, fps: f64, template: Array2<f64>) -> Result<Self> {
        if frames.ncols() != 3 * n_landmarks {
            return Err(CoreError::Validation(format!(
                "motion width {} != 3 * {n_landmarks}",
                frames.ncols()
            )));
        }
        if template.nrows() != n_landmarks || template.ncols() != 3 {
            return Err(CoreError::Validation("template must be N-by-3".into()));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Validation("non-finite displacement".into()));
        }
        Ok(MotionSequence {
            frames,
            n_landmarks,
            fps,
            template,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn motion_dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Per-frame N-by-3 displacement arrays.
    pub fn displacement_frames(&self) -> Vec<Array2<f64>> {
        unflatten_frames(&self.frames, self.n_landmarks)
    }

    /// Per-frame N-by-3 absolute landmark positions (template + displacement).
    pub fn position_frames(&self) -> Vec<Array2<f64>> {
        self.displacement_frames()
            .into_iter()
            .map(|d| &d + &self.template)
            .collect()
    }
}

/// Flatten T per-frame N-by-3 arrays into T-by-3N.
pub fn flatten_frames(frames: &[Array2<f64>]) -> Mat {
    assert!(!frames.is_empty());
    let n = frames[0].nrows();
    let mut out = Mat::zeros((frames.len(), 3 * n));
    for (t, f) in frames.iter().enumerate() {
        assert_eq!(f.dim(), (n, 3));
        for i in 0..n {
            for k in 0..3 {
                out[(t, 3 * i + k)] = f[(i, k)];
            }
        }
    }
    out
}

/// Inverse of [`flatten_frames`].
pub fn unflatten_frames(mat: &Mat, n_landmarks: usize) -> Vec<Array2<f64>> {
    assert_eq!(mat.ncols(), 3 * n_landmarks);
    (0..mat.nrows())
        .map(|t| Array2::from_shape_fn((n_landmarks, 3), |(i, k)| mat[(t, 3 * i + k)]))
        .collect()
}

/// Emotion vocabulary with its intensity range. Ids are positions in the
/// ordered name list; "neutral" must always be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionVocab {
    pub emotions: Vec<String>,
    pub max_intensity: u32,
}

impl EmotionVocab {
    pub fn new(emotions: Vec<String>, max_intensity: u32) -> Result<EmotionVocab> {
        if !emotions.iter().any(|e| e == "neutral") {
            return Err(CoreError::Validation(
                "emotion vocabulary must contain \"neutral\"".into(),
            ));
        }
        if max_intensity < 1 {
            return Err(CoreError::Validation("max_intensity must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &emotions {
            if !seen.insert(e) {
                return Err(CoreError::Validation(format!("duplicate emotion {e:?}")));
            }
        }
        Ok(EmotionVocab {
            emotions,
            max_intensity,
        })
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.emotions
            .iter()
            .position(|e| e == name)
            .ok_or_else(|| CoreError::Validation(format!("unknown emotion {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.emotions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emotions.is_empty()
    }

    pub fn label(&self, emotion: &str, intensity: u32) -> Result<AffectLabel> {
        let id = self.id(emotion)?;
        if intensity < 1 || intensity > self.max_intensity {
            return Err(CoreError::Validation(format!(
                "intensity {intensity} outside 1..={}",
                self.max_intensity
            )));
        }
        Ok(AffectLabel {
            emotion_id: id,
            intensity,
        })
    }

    /// The neutral convention for emotion-free corpora.
    pub fn neutral(&self) -> AffectLabel {
        AffectLabel {
            emotion_id: self.id("neutral").expect("vocab always has neutral"),
            intensity: 1,
        }
    }
}

/// Conditioning pair (emotion category id, intensity level >= 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffectLabel {
    pub emotion_id: usize,
    pub intensity: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_requires_neutral_and_bounds_intensity() {
        assert!(EmotionVocab::new(vec!["happy".into()], 3).is_err());
        let vocab = EmotionVocab::new(vec!["neutral".into(), "happy".into()], 3).unwrap();
        assert!(vocab.label("happy", 3).is_ok());
        assert!(vocab.label("happy", 0).is_err());
        assert!(vocab.label("happy", 4).is_err());
        assert!(vocab.label("angry", 1).is_err());
        assert_eq!(vocab.neutral().intensity, 1);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let frames: Vec<Array2<f64>> = (0..3)
            .map(|t| Array2::from_shape_fn((4, 3), |(i, k)| (t * 100 + i * 3 + k) as f64))
            .collect();
        let flat = flatten_frames(&frames);
        assert_eq!(flat.dim(), (3, 12));
        assert_eq!(flat[(1, 5)], 105.0); // frame 1, landmark 1, z
        let back = unflatten_frames(&flat, 4);
        assert_eq!(back, frames);
    }
}
