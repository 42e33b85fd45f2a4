//! Versioned checkpoint archive: a JSON header (section key, config
//! snapshot, vocabulary, normalization, schedule, compatibility fingerprint)
//! followed by all parameter tensors as little-endian f64, in header order.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ats::EmotionVocab;
use crate::error::{CoreError, Result};
use crate::nn::params::ParamStore;
use crate::nn::tape::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Linear-schedule parameters stored alongside an ATS checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// "ats" or "stm".
    pub section: String,
    /// Module config snapshot (DenoiserConfig / StmConfig as JSON).
    pub config: serde_json::Value,
    pub n_landmarks: usize,
    pub fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<EmotionVocab>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    /// Feature-extractor snapshot (ATS), so inference reuses the training
    /// conditioning pipeline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<crate::audio::FeatureConfig>,
    #[serde(default)]
    tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn new(section: &str, config: serde_json::Value, n_landmarks: usize, fps: f64) -> Self {
        CheckpointHeader {
            section: section.into(),
            config,
            n_landmarks,
            fps,
            vocab: None,
            norm_stats: None,
            schedule: None,
            features: None,
            tensors: Vec::new(),
        }
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    mut header: CheckpointHeader,
    store: &ParamStore,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    let tensors = store.export();
    header.tensors = tensors
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            rows: m.nrows(),
            cols: m.ncols(),
        })
        .collect();
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CoreError::Config(format!("header: {e}")))?;
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for (_, m) in &tensors {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, BTreeMap<String, Mat>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::parse(path, "not a checkpoint (bad magic)"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|e| CoreError::io(path, e))?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::parse(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| CoreError::io(path, e))?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CoreError::parse(path, format!("header: {e}")))?;
    let mut tensors = BTreeMap::new();
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let mut m = Mat::zeros((entry.rows, entry.cols));
        for val in m.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| CoreError::io(path, e))?;
            *val = f64::from_le_bytes(buf);
        }
        tensors.insert(entry.name.clone(), m);
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::normal_init;

    #[test]
    fn checkpoint_roundtrip_preserves_tensors_and_header() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(1, "ckpt");
        store.register("ats.a", normal_init(3, 4, 1.0, &mut rng), false);
        store.register("ats.b", normal_init(1, 5, 1.0, &mut rng), true);
        let header = CheckpointHeader {
            section: "ats".into(),
            config: serde_json::json!({"d_model": 16}),
            n_landmarks: 68,
            fps: 25.0,
            vocab: Some(EmotionVocab::new(vec!["neutral".into()], 1).unwrap()),
            norm_stats: Some([1.0, 2.0, 3.0]),
            schedule: Some(ScheduleSpec {
                timesteps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
            }),
            features: Some(crate::audio::FeatureConfig::default()),
            tensors: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, header, &store).unwrap();
        let (h, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(h.section, "ats");
        assert_eq!(h.norm_stats, Some([1.0, 2.0, 3.0]));
        assert_eq!(h.schedule.as_ref().unwrap().timesteps, 100);
        let a_id = store.id("ats.a").unwrap();
        assert_eq!(tensors["ats.a"], *store.value(a_id));
        // import back into a fresh store with the same registration order
        let mut store2 = ParamStore::new();
        let mut rng2 = crate::rng::stream(2, "ckpt2");
        store2.register("ats.a", normal_init(3, 4, 1.0, &mut rng2), false);
        store2.register("ats.b", normal_init(1, 5, 1.0, &mut rng2), true);
        store2.import(&tensors).unwrap();
        let b_id = store.id("ats.b").unwrap();
        let b2_id = store2.id("ats.b").unwrap();
        assert_eq!(store.value(b_id), store2.value(b2_id));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
