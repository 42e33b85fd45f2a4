//! Speech-to-feature conversion: a pluggable extractor turns a waveform into
//! an S-by-C feature matrix at the extractor's native rate, which is then
//! resampled onto the animation frame timeline.

pub mod mel;
pub mod wav;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
pub use wav::{load_audio, save_audio, Waveform};

/// Feature matrix at the extractor's native temporal resolution.
#[derive(Debug, Clone)]
pub struct AudioFeatures {
    /// S-by-C: S native frames, C channels.
    pub matrix: Array2<f64>,
    /// Native feature frames per second.
    pub native_rate: f64,
}

/// Features aligned to the animation timeline: exactly
/// `T = round(duration * fps)` rows.
#[derive(Debug, Clone)]
pub struct FrameAlignedFeatures {
    pub matrix: Array2<f64>,
    pub fps: f64,
}

impl FrameAlignedFeatures {
    pub fn n_frames(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Deterministic DSP default: log-mel filterbank, C = n_mels.
    Logmel,
    /// Adapter for an external pretrained speech encoder. Features are read
    /// from a sidecar FTF1 file next to the audio (`<audio>.feat`), produced
    /// offline by the encoder; C is whatever the encoder emits (e.g. 768).
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub extractor: ExtractorKind,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Sidecar suffix appended to the audio path for the external adapter.
    pub external_suffix: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            extractor: ExtractorKind::Logmel,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            external_suffix: ".feat".to_string(),
        }
    }
}

impl FeatureConfig {
    pub fn n_channels_hint(&self) -> Option<usize> {
        match self.extractor {
            ExtractorKind::Logmel => Some(self.n_mels),
            ExtractorKind::External => None,
        }
    }
}

/// Extract features from an in-memory waveform. The external adapter has no
/// waveform-only path; use [`features_for_file`] for it.
pub fn extract_features(wave: &Waveform, config: &FeatureConfig) -> Result<AudioFeatures> {
    match config.extractor {
        ExtractorKind::Logmel => mel::extract_logmel(wave, config),
        ExtractorKind::External => Err(CoreError::Config(
            "external extractor needs the audio path for its sidecar; use features_for_file".into(),
        )),
    }
}

/// Extract features for an audio file, dispatching on the configured extractor.
pub fn features_for_file(audio_path: impl AsRef<Path>, config: &FeatureConfig) -> Result<AudioFeatures> {
    let audio_path = audio_path.as_ref();
    match config.extractor {
        ExtractorKind::Logmel => {
            let wave = load_audio(audio_path)?;
            mel::extract_logmel(&wave, config)
        }
        ExtractorKind::External => {
            let mut sidecar = audio_path.as_os_str().to_owned();
            sidecar.push(&config.external_suffix);
            let sidecar = std::path::PathBuf::from(sidecar);
            if !sidecar.exists() {
                return Err(CoreError::Validation(format!(
                    "external extractor: sidecar feature file {} not found (run the external encoder first)",
                    sidecar.display()
                )));
            }
            let (matrix, native_rate) = crate::data::packed::read_matrix(&sidecar)?;
            if matrix.nrows() == 0 {
                return Err(CoreError::Validation(format!(
                    "empty feature matrix in {}",
                    sidecar.display()
                )));
            }
            Ok(AudioFeatures {
                matrix,
                native_rate,
            })
        }
    }
}

/// Linear interpolation of native feature rows onto the animation timeline.
///
/// Native row `s` is treated as the sample at time `(s + 0.5) / native_rate`;
/// target timestamps are `(k + 0.5) / fps` clamped to `[0, duration]`, with
/// `T = round(duration * fps)` output rows.
pub fn resample_to_frames(
    feats: &AudioFeatures,
    fps: f64,
    duration: f64,
) -> Result<FrameAlignedFeatures> {
    if fps <= 0.0 {
        return Err(CoreError::Config(format!("fps must be positive, got {fps}")));
    }
    let s = feats.matrix.nrows();
    if s == 0 {
        return Err(CoreError::Validation("empty feature matrix".into()));
    }
    let c = feats.matrix.ncols();
    let t_frames = (duration * fps).round() as usize;
    let mut out = Array2::zeros((t_frames, c));
    for k in 0..t_frames {
        let t_k = ((k as f64 + 0.5) / fps).clamp(0.0, duration);
        let pos = (t_k * feats.native_rate - 0.5).clamp(0.0, (s - 1) as f64);
        let mut i0 = pos.floor() as usize;
        let mut w = pos - i0 as f64;
        // snap to the grid so aligned timelines copy rows exactly
        if w > 1.0 - 1e-9 {
            i0 += 1;
            w = 0.0;
        } else if w < 1e-9 {
            w = 0.0;
        }
        let i0 = i0.min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        for ch in 0..c {
            out[(k, ch)] = (1.0 - w) * feats.matrix[(i0, ch)] + w * feats.matrix[(i1, ch)];
        }
    }
    Ok(FrameAlignedFeatures {
        matrix: out,
        fps,
    })
}
