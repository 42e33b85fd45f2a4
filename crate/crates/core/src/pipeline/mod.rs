//! End-to-end orchestration: audio + affect + mesh -> exported animation,
//! plus metric evaluation of predictions against ground-truth bundles and
//! sequence export/conversion.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ats::sampler::{ddim_sample, SamplerConfig};
use crate::ats::unflatten_frames;
use crate::audio::{features_for_file, load_audio, resample_to_frames};
use crate::config::write_resolved;
use crate::data::bundle::Manifest;
use crate::data::cache::Cache;
use crate::data::packed::{self, PackedSequence};
use crate::error::{CoreError, Result};
use crate::mesh::io::{load_mesh, save_mesh, MeshFormat};
use crate::mesh::landmarks::{extract_landmarks, LandmarkSpec};
use crate::metrics::{full_report, MetricReport, TrajectoryPair};
use crate::nn::tape::Mat;
use crate::train::ats_train::load_ats_checkpoint;
use crate::train::stm_train::{load_stm_checkpoint, operators_with_cached_spectral};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Obj,
    Ply,
    Packed,
}

impl std::str::FromStr for ExportFormat {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<ExportFormat> {
        match s {
            "obj" => Ok(ExportFormat::Obj),
            "ply" => Ok(ExportFormat::Ply),
            "packed" => Ok(ExportFormat::Packed),
            other => Err(CoreError::Config(format!(
                "unknown export format {other:?} (obj | ply | packed)"
            ))),
        }
    }
}

/// Write a mesh sequence: one OBJ/PLY per frame, or a single packed file.
pub fn export_sequence(
    out_dir: &Path,
    faces: &[[usize; 3]],
    frames: &[Array2<f64>],
    format: ExportFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut written = Vec::new();
    match format {
        ExportFormat::Packed => {
            let path = out_dir.join("animation.ftk");
            packed::write_sequence(
                &path,
                &PackedSequence {
                    faces: faces.to_vec(),
                    frames: frames.to_vec(),
                },
            )?;
            written.push(path);
        }
        ExportFormat::Obj | ExportFormat::Ply => {
            let (ext, mesh_format) = match format {
                ExportFormat::Obj => ("obj", MeshFormat::Obj),
                _ => ("ply", MeshFormat::PlyBinary),
            };
            for (t, frame) in frames.iter().enumerate() {
                let mesh = crate::mesh::Mesh::new(frame.clone(), faces.to_vec())?;
                let path = out_dir.join(format!("frame_{t:05}.{ext}"));
                save_mesh(&path, &mesh, mesh_format)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Read a predicted mesh sequence: a packed file, a directory holding
/// `animation.ftk`, or a directory of per-frame OBJ/PLY files.
pub fn load_prediction(path: &Path) -> Result<PackedSequence> {
    if path.is_file() {
        return packed::read_sequence(path);
    }
    let packed_path = path.join("animation.ftk");
    if packed_path.exists() {
        return packed::read_sequence(&packed_path);
    }
    let mut frame_files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| CoreError::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("frame_") && (n.ends_with(".obj") || n.ends_with(".ply")))
                .unwrap_or(false)
        })
        .collect();
    if frame_files.is_empty() {
        return Err(CoreError::Validation(format!(
            "no prediction found under {} (expected animation.ftk or frame_*.obj/ply)",
            path.display()
        )));
    }
    frame_files.sort();
    let mut faces: Option<Vec<[usize; 3]>> = None;
    let mut frames = Vec::with_capacity(frame_files.len());
    for f in &frame_files {
        let mesh = load_mesh(f)?;
        match &faces {
            None => faces = Some(mesh.faces().to_vec()),
            Some(existing) => {
                if existing != mesh.faces() {
                    return Err(CoreError::Validation(format!(
                        "connectivity changes across frames at {}",
                        f.display()
                    )));
                }
            }
        }
        frames.push(mesh.vertices().clone());
    }
    Ok(PackedSequence {
        faces: faces.unwrap(),
        frames,
    })
}

/// Everything `animate` needs; doubles as the resolved-config snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnimateRequest {
    pub audio: PathBuf,
    pub emotion: String,
    pub intensity: u32,
    pub mesh: PathBuf,
    pub landmarks: PathBuf,
    pub ats_checkpoint: PathBuf,
    pub stm_checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub format: ExportFormat,
    pub seed: u64,
    /// Animation rate; None = the rate the ATS checkpoint was trained at.
    pub fps: Option<f64>,
    pub ddim_steps: usize,
    pub dump_attention: bool,
}

pub struct AnimateSummary {
    pub n_frames: usize,
    pub out_dir: PathBuf,
    pub landmark_json: PathBuf,
}

/// Landmark trajectory sidecar written next to every animation. Values are
/// full-precision f64, so feeding this file back through the densifier
/// reproduces the in-process pipeline bitwise.
#[derive(Debug, Serialize, Deserialize)]
pub struct LandmarkTrajectoryFile {
    pub fps: f64,
    pub n_landmarks: usize,
    /// Template landmark positions, N x 3.
    pub template: Vec<[f64; 3]>,
    /// Per-frame displacements, T x N x 3.
    pub displacements: Vec<Vec<[f64; 3]>>,
}

impl LandmarkTrajectoryFile {
    pub fn displacement_frames(&self) -> Vec<Array2<f64>> {
        self.displacements
            .iter()
            .map(|frame| {
                Array2::from_shape_fn((self.n_landmarks, 3), |(i, c)| frame[i][c])
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<LandmarkTrajectoryFile> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::parse(path, e.to_string()))
    }
}

pub fn animate(request: &AnimateRequest) -> Result<AnimateSummary> {
    let out_dir = &request.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    write_resolved(out_dir, request)?;

    let ats = load_ats_checkpoint(&request.ats_checkpoint)?;
    let stm = load_stm_checkpoint(&request.stm_checkpoint)?;
    let spec = LandmarkSpec::load(&request.landmarks)?;

    // compatibility: shared landmark count and a known affect label
    let n = ats.n_landmarks;
    if stm.model.config.n_landmarks != n || spec.n_landmarks() != n {
        return Err(CoreError::Validation(format!(
            "landmark count mismatch: ats {n}, stm {}, spec {}",
            stm.model.config.n_landmarks,
            spec.n_landmarks()
        )));
    }
    let affect = ats.vocab.label(&request.emotion, request.intensity)?;

    let mesh = load_mesh(&request.mesh)?;
    spec.validate_for(&mesh)?;
    let template_landmarks = extract_landmarks(&mesh, &spec)?.positions;

    // audio -> frame-aligned conditioning
    let fps = request.fps.unwrap_or(ats.fps);
    let wave = load_audio(&request.audio)?;
    let raw = features_for_file(&request.audio, &ats.features)?;
    let aligned = resample_to_frames(&raw, fps, wave.duration())?;
    if aligned.n_channels() != ats.denoiser.config.audio_dim {
        return Err(CoreError::Validation(format!(
            "audio features have {} channels, checkpoint expects {}",
            aligned.n_channels(),
            ats.denoiser.config.audio_dim
        )));
    }

    // sparse stage
    let sampler = SamplerConfig {
        ddim_steps: request.ddim_steps,
        band_radius: ats.denoiser.config.band_radius,
        seed: request.seed,
    };
    let normalized = ddim_sample(
        &ats.store,
        &ats.denoiser,
        &ats.schedule,
        &sampler,
        &aligned.matrix,
        affect,
    )?;
    let displacement_flat = ats.norm_stats.denormalize(&normalized);
    let displacement_frames = unflatten_frames(&displacement_flat, n);

    write_landmark_trajectory(
        &out_dir.join("landmarks.json"),
        fps,
        n,
        &template_landmarks,
        &displacement_frames,
    )?;

    // dense stage
    let mesh_bytes = std::fs::read(&request.mesh).map_err(|e| CoreError::io(&request.mesh, e))?;
    let cache = Cache::from_env();
    let ops = operators_with_cached_spectral(
        &mesh,
        &mesh_bytes,
        stm.model.config.spectral_k,
        &cache,
    )?;
    let bundle = crate::stm::intrinsic::MeshBundle::new(
        &mesh,
        &ops,
        stm.model.config.gradient_features,
    )?;
    let (fields, attention) = stm.model.stm_forward(
        &stm.store,
        &bundle,
        &displacement_frames,
        request.dump_attention,
    )?;
    let frames: Vec<Array2<f64>> = fields.iter().map(|dv| mesh.vertices() + dv).collect();
    export_sequence(out_dir, mesh.faces(), &frames, request.format)?;

    if let Some(dumps) = attention {
        write_attention_dump(&out_dir.join("attention"), &dumps)?;
    }

    Ok(AnimateSummary {
        n_frames: frames.len(),
        out_dir: out_dir.clone(),
        landmark_json: out_dir.join("landmarks.json"),
    })
}

fn write_landmark_trajectory(
    path: &Path,
    fps: f64,
    n: usize,
    template: &Array2<f64>,
    displacement_frames: &[Array2<f64>],
) -> Result<()> {
    let doc = LandmarkTrajectoryFile {
        fps,
        n_landmarks: n,
        template: (0..n)
            .map(|i| [template[(i, 0)], template[(i, 1)], template[(i, 2)]])
            .collect(),
        displacements: displacement_frames
            .iter()
            .map(|f| (0..n).map(|i| [f[(i, 0)], f[(i, 1)], f[(i, 2)]]).collect())
            .collect(),
    };
    let text = serde_json::to_string(&doc).expect("trajectory serializes");
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// Per-frame attention matrices (n-by-N f32 row-major little-endian) plus a
/// JSON sidecar with the dimensions.
fn write_attention_dump(dir: &Path, dumps: &[Mat]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let (rows, cols) = dumps
        .first()
        .map(|m| (m.nrows(), m.ncols()))
        .unwrap_or((0, 0));
    for (t, m) in dumps.iter().enumerate() {
        let path = dir.join(format!("frame_{t:05}.bin"));
        let mut bytes = Vec::with_capacity(m.len() * 4);
        for v in m.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))?;
    }
    let sidecar = serde_json::json!({
        "frames": dumps.len(),
        "rows": rows,
        "cols": cols,
        "dtype": "f32",
        "layout": "row-major",
        "byte_order": "little-endian",
    });
    let path = dir.join("attention.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| CoreError::io(&path, e))
}

/// Densify a saved landmark trajectory onto a mesh (the serialized ATS-STM
/// boundary; bitwise-equivalent to the in-process pipeline).
pub fn densify_from_file(
    trajectory: &Path,
    mesh_path: &Path,
    stm_checkpoint: &Path,
) -> Result<(Vec<Array2<f64>>, Vec<[usize; 3]>)> {
    let stm = load_stm_checkpoint(stm_checkpoint)?;
    let doc = LandmarkTrajectoryFile::load(trajectory)?;
    if doc.n_landmarks != stm.model.config.n_landmarks {
        return Err(CoreError::Validation(format!(
            "trajectory has {} landmarks, checkpoint expects {}",
            doc.n_landmarks,
            stm.model.config.n_landmarks
        )));
    }
    let mesh = load_mesh(mesh_path)?;
    let mesh_bytes = std::fs::read(mesh_path).map_err(|e| CoreError::io(mesh_path, e))?;
    let cache = Cache::from_env();
    let ops =
        operators_with_cached_spectral(&mesh, &mesh_bytes, stm.model.config.spectral_k, &cache)?;
    let bundle =
        crate::stm::intrinsic::MeshBundle::new(&mesh, &ops, stm.model.config.gradient_features)?;
    let frames = doc.displacement_frames();
    let (fields, _) = stm.model.stm_forward(&stm.store, &bundle, &frames, false)?;
    let out: Vec<Array2<f64>> = fields.iter().map(|dv| mesh.vertices() + dv).collect();
    Ok((out, mesh.faces().to_vec()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub dataset: PathBuf,
    /// Directory holding one prediction per sequence id (see
    /// [`load_prediction`]), or a single sequence's prediction when
    /// `sequences` has exactly one entry.
    pub predictions: PathBuf,
    /// Sequence ids to evaluate; empty = all dense test-split sequences.
    pub sequences: Vec<String>,
    pub out_dir: PathBuf,
    /// Sequences are independent; this bounds the evaluation fan-out.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

/// Per-sequence metric report (the published JSON document).
#[derive(Debug, Serialize, Deserialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub frames: usize,
    pub metrics: MetricReport,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn evaluate(request: &EvaluateRequest) -> Result<Vec<SequenceReport>> {
    let root = &request.dataset;
    let manifest = Manifest::load(root)?;
    std::fs::create_dir_all(&request.out_dir)
        .map_err(|e| CoreError::io(&request.out_dir, e))?;
    write_resolved(&request.out_dir, request)?;

    let ids: Vec<String> = if request.sequences.is_empty() {
        manifest
            .sequences
            .iter()
            .filter(|s| s.split == "test" && s.has_dense)
            .map(|s| s.id.clone())
            .collect()
    } else {
        request.sequences.clone()
    };
    if ids.is_empty() {
        return Err(CoreError::Validation(
            "no sequences to evaluate (no dense test split and none requested)".into(),
        ));
    }

    // sequences are independent: fan out over a bounded worker pool, then
    // write files in input order
    let workers = request.workers.max(1).min(ids.len());
    let results: Vec<Result<SequenceReport>> = if workers <= 1 {
        ids.iter()
            .map(|id| evaluate_one(root, &manifest, id, &request.predictions))
            .collect()
    } else {
        let mut results: Vec<Option<Result<SequenceReport>>> =
            (0..ids.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= ids.len() {
                        break;
                    }
                    let report = evaluate_one(root, &manifest, &ids[i], &request.predictions);
                    slots.lock().unwrap()[i] = Some(report);
                });
            }
        });
        results.into_iter().map(|r| r.expect("slot filled")).collect()
    };

    let mut reports = Vec::with_capacity(ids.len());
    for result in results {
        let report = result?;
        let path = request
            .out_dir
            .join(format!("{}.metrics.json", report.sequence));
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| CoreError::io(&path, e))?;
        reports.push(report);
    }

    write_corpus_csv(&request.out_dir.join("corpus.csv"), &reports)?;
    Ok(reports)
}

fn evaluate_one(
    root: &Path,
    manifest: &Manifest,
    id: &str,
    predictions: &Path,
) -> Result<SequenceReport> {
    let entry = manifest
        .sequences
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CoreError::Validation(format!("unknown sequence {id:?}")))?;
    let seq = crate::data::bundle::load_sequence(root, manifest, entry, true)?;
    let dense = seq.dense.as_ref().ok_or_else(|| {
        CoreError::Validation(format!("sequence {id} has no dense ground truth"))
    })?;
    let ident = manifest.identity(entry.identity)?;
    let mesh = load_mesh(root.join(&ident.mesh))?;
    let spec = LandmarkSpec::load(root.join(&ident.landmarks))?;
    spec.validate_for(&mesh)?;

    let pred_path = if predictions.join(id).exists() {
        predictions.join(id)
    } else {
        predictions.to_path_buf()
    };
    let prediction = load_prediction(&pred_path)?;
    if prediction.n_points() != mesh.n_vertices() {
        return Err(CoreError::Validation(format!(
            "sequence {id}: prediction has {} vertices, ground truth {}",
            prediction.n_points(),
            mesh.n_vertices()
        )));
    }
    let mut warnings = Vec::new();
    let t = prediction.n_frames().min(dense.n_frames());
    if prediction.n_frames() != dense.n_frames() {
        warnings.push(format!(
            "frame counts differ (prediction {}, truth {}): truncated to {t}",
            prediction.n_frames(),
            dense.n_frames()
        ));
    }
    // displacement space: both sides relative to the template vertices
    let truth: Vec<Array2<f64>> = dense.frames[..t]
        .iter()
        .map(|f| f - mesh.vertices())
        .collect();
    let pred: Vec<Array2<f64>> = prediction.frames[..t]
        .iter()
        .map(|f| f - mesh.vertices())
        .collect();
    let pair = TrajectoryPair::new(truth, pred)?;
    let metrics = full_report(
        &pair,
        spec.region("mouth")?,
        spec.region("upper_face")?,
        spec.region("lips")?,
    )?;
    Ok(SequenceReport {
        sequence: id.to_string(),
        frames: t,
        metrics,
        warnings,
    })
}

fn write_corpus_csv(path: &Path, reports: &[SequenceReport]) -> Result<()> {
    let io_err =
        |path: &Path, e: csv::Error| CoreError::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "sequence", "lve", "mve", "fdd", "dtw", "dfd", "delta_m", "delta_cd",
    ])
    .map_err(|e| io_err(path, e))?;
    let names = ["lve", "mve", "fdd", "dtw", "dfd", "delta_m", "delta_cd"];
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for r in reports {
        let vals = r.metrics.values();
        for (c, (_, v)) in vals.iter().enumerate() {
            columns[c].push(*v);
        }
        let mut record = vec![r.sequence.clone()];
        record.extend(vals.iter().map(|(_, v)| format!("{v:.12e}")));
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    let mean_std = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut mean_row = vec!["mean".to_string()];
    let mut std_row = vec!["std".to_string()];
    for col in &columns {
        let (m, s) = mean_std(col);
        mean_row.push(format!("{m:.12e}"));
        std_row.push(format!("{s:.12e}"));
    }
    w.write_record(&mean_row).map_err(|e| io_err(path, e))?;
    w.write_record(&std_row).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}
