//! Training orchestration for the two stages. The stages are trained
//! independently: the landmark diffusion model on landmark trajectories, the
//! densifier on dense mesh frames driven by ground-truth landmark motion.

pub mod ats_train;
pub mod stm_train;

use std::path::Path;

use ndarray::Array2;

use crate::audio::{features_for_file, resample_to_frames, FeatureConfig};
use crate::data::bundle::{LoadedSequence, Manifest};
use crate::data::cache::{content_key, Cache};
use crate::error::{CoreError, Result};
use crate::mesh::landmarks::{extract_landmarks, LandmarkSpec};
use crate::mesh::Mesh;
use crate::nn::tape::Mat;

/// Derive a stable u64 noise seed from run seed, label, and indices.
pub fn derive_seed(seed: u64, label: &str, a: u64, b: u64) -> u64 {
    rand::Rng::gen(&mut crate::rng::stream(seed, &format!("{label}/{a}/{b}")))
}

/// Frame-aligned audio features for one sequence, cached by content.
pub fn aligned_features(
    audio_path: &Path,
    features: &FeatureConfig,
    fps: f64,
    cache: &Cache,
) -> Result<Mat> {
    let wave_bytes = std::fs::read(audio_path).map_err(|e| CoreError::io(audio_path, e))?;
    let config_json = serde_json::to_vec(features).expect("feature config serializes");
    let key = content_key("feat", &[&wave_bytes, &config_json, &fps.to_le_bytes()]);
    if let Some((mat, _)) = cache.get_matrix(&key, "aligned.ftd") {
        return Ok(mat);
    }
    let raw = features_for_file(audio_path, features)?;
    let duration = {
        let wave = crate::audio::load_audio(audio_path)?;
        wave.duration()
    };
    let aligned = resample_to_frames(&raw, fps, duration)?;
    cache.put_matrix(&key, "aligned.ftd", &aligned.matrix, fps);
    Ok(aligned.matrix)
}

/// Landmark displacement frames (N-by-3 each) for a loaded sequence, from its
/// stored positions minus the identity template.
pub fn displacement_frames(
    seq: &LoadedSequence,
    template_landmarks: &Array2<f64>,
) -> Result<Vec<Array2<f64>>> {
    let positions = seq.landmark_positions.as_ref().ok_or_else(|| {
        CoreError::Validation(format!(
            "sequence {} has no landmark trajectory",
            seq.entry.id
        ))
    })?;
    Ok(positions.iter().map(|p| p - template_landmarks).collect())
}

/// Per-identity template data shared by both trainers.
pub struct IdentityAssets {
    pub id: usize,
    pub mesh: Mesh,
    pub spec: LandmarkSpec,
    pub template_landmarks: Array2<f64>,
}

pub fn load_identity_assets(root: &Path, manifest: &Manifest) -> Result<Vec<IdentityAssets>> {
    manifest
        .identities
        .iter()
        .map(|ident| {
            let mesh = crate::mesh::io::load_mesh(root.join(&ident.mesh))?;
            let spec = LandmarkSpec::load(root.join(&ident.landmarks))?;
            if spec.n_landmarks() != manifest.n_landmarks {
                return Err(CoreError::Validation(format!(
                    "identity {}: landmark spec has {} anchors, manifest says {}",
                    ident.id,
                    spec.n_landmarks(),
                    manifest.n_landmarks
                )));
            }
            let template_landmarks = extract_landmarks(&mesh, &spec)?.positions;
            Ok(IdentityAssets {
                id: ident.id,
                mesh,
                spec,
                template_landmarks,
            })
        })
        .collect()
}

pub fn assets_for<'a>(assets: &'a [IdentityAssets], id: usize) -> Result<&'a IdentityAssets> {
    assets
        .iter()
        .find(|a| a.id == id)
        .ok_or_else(|| CoreError::Validation(format!("unknown identity {id}")))
}

/// Training log rows shared by both trainers.
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_pos_loss: f64,
    pub val_loss: f64,
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let io_err = |path: &Path, e: csv::Error| {
        CoreError::io(path, std::io::Error::other(e.to_string()))
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["epoch", "steps", "train_loss", "train_pos_loss", "val_loss"])
        .map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.steps.to_string(),
            format!("{:.12e}", r.train_loss),
            format!("{:.12e}", r.train_pos_loss),
            format!("{:.12e}", r.val_loss),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

/// Seeded Fisher-Yates shuffle (deterministic per epoch).
pub fn shuffled_indices(n: usize, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut rng = crate::rng::stream(seed, &format!("{label}/{epoch}"));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx
}
