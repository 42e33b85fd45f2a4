//! Synthetic dataset generator: ellipsoid faces with a canonical 68-landmark
//! layout, amplitude-modulated sine-sweep audio whose envelope drives mouth
//! opening, per-emotion static offset fields scaled by intensity, and dense
//! mesh frames produced by a fixed radial-basis interpolation of the landmark
//! field. Everything is deterministic given the spec seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ats::EmotionVocab;
use crate::audio::wav::{save_audio, Waveform};
use crate::data::bundle::{
    displacement_std, IdentityEntry, Manifest, NormStats, SequenceEntry, VariantEntry,
};
use crate::data::packed::{write_sequence, PackedSequence};
use crate::error::{CoreError, Result};
use crate::mesh::io::{save_mesh, MeshFormat};
use crate::mesh::landmarks::{extract_landmarks, Anchor, LandmarkSpec};
use crate::mesh::{primitives, Mesh};

pub const EMOTION_FIELDS_NAME: &str = "emotion_fields.json";

/// Weights over the three basis offset patterns that make up an emotion's
/// static landmark field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmotionFieldSpec {
    pub name: String,
    /// Eyebrow raise (+) or lower (-).
    pub brow: f64,
    /// Mouth-corner lift (+) or droop (-).
    pub corner: f64,
    /// Jaw drop.
    pub jaw: f64,
    /// Field amplitude in mesh units at maximum intensity.
    pub amplitude: f64,
}

impl Default for EmotionFieldSpec {
    fn default() -> Self {
        EmotionFieldSpec {
            name: "neutral".into(),
            brow: 0.0,
            corner: 0.0,
            jaw: 0.0,
            amplitude: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseMeshSpec {
    /// "uv" (rows x cols UV sphere) or "icosphere" (subdivision level).
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub level: usize,
    /// Ellipsoid semi-axes (x = width, y = height, z = depth).
    pub axes: [f64; 3],
}

impl Default for BaseMeshSpec {
    fn default() -> Self {
        BaseMeshSpec {
            kind: "uv".into(),
            rows: 30,
            cols: 50,
            level: 3,
            axes: [0.85, 1.0, 0.8],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub dataset_id: String,
    pub identities: usize,
    pub sequences_per_identity: usize,
    pub duration_range: [f64; 2],
    pub fps: f64,
    pub sample_rate: u32,
    pub emotions: Vec<EmotionFieldSpec>,
    pub max_intensity: u32,
    pub base_mesh: BaseMeshSpec,
    /// Peak mouth-opening displacement in mesh units.
    pub articulation_amplitude: f64,
    /// Scale of the per-identity articulation-style field.
    pub identity_offset_amplitude: f64,
    /// Scales the audio envelope; 0 produces silent audio and zero motion.
    pub envelope_amplitude: f64,
    /// Midpoint-subdivision levels to emit as remesh variants.
    pub remesh_levels: Vec<usize>,
    /// Write dense per-frame vertex arrays.
    pub dense_frames: bool,
    /// Splits that also get dense frames on the remesh variants.
    pub variant_dense_splits: Vec<String>,
    /// RBF kernel width as a fraction of the mesh radius.
    pub rbf_sigma_factor: f64,
    /// Split assignment cycle over the per-identity sequence index.
    pub split_cycle: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            dataset_id: "synthetic-faces".into(),
            identities: 2,
            sequences_per_identity: 6,
            duration_range: [1.2, 2.0],
            fps: 25.0,
            sample_rate: 16000,
            emotions: default_emotions(),
            max_intensity: 3,
            base_mesh: BaseMeshSpec::default(),
            articulation_amplitude: 0.12,
            identity_offset_amplitude: 0.15,
            envelope_amplitude: 1.0,
            remesh_levels: vec![1],
            dense_frames: true,
            variant_dense_splits: vec!["test".into()],
            rbf_sigma_factor: 0.35,
            split_cycle: vec![
                "train".into(),
                "train".into(),
                "train".into(),
                "train".into(),
                "val".into(),
                "test".into(),
            ],
            seed: 0,
        }
    }
}

pub fn default_emotions() -> Vec<EmotionFieldSpec> {
    vec![
        EmotionFieldSpec::default(),
        EmotionFieldSpec {
            name: "happy".into(),
            brow: 1.0,
            corner: 1.0,
            jaw: 0.0,
            amplitude: 0.08,
        },
        EmotionFieldSpec {
            name: "sad".into(),
            brow: -1.0,
            corner: -1.0,
            jaw: 0.0,
            amplitude: 0.08,
        },
        EmotionFieldSpec {
            name: "surprised".into(),
            brow: 1.4,
            corner: 0.0,
            jaw: 0.8,
            amplitude: 0.08,
        },
    ]
}

impl SyntheticDatasetSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<SyntheticDatasetSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let spec: SyntheticDatasetSpec = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.sequences_per_identity == 0 {
            return Err(CoreError::Config("empty dataset spec".into()));
        }
        if self.fps <= 0.0 || self.sample_rate == 0 {
            return Err(CoreError::Config("fps and sample_rate must be positive".into()));
        }
        if !(self.duration_range[0] > 0.0 && self.duration_range[0] <= self.duration_range[1]) {
            return Err(CoreError::Config("bad duration range".into()));
        }
        if !self.emotions.iter().any(|e| e.name == "neutral") {
            return Err(CoreError::Config("emotions must include neutral".into()));
        }
        if self.split_cycle.is_empty() {
            return Err(CoreError::Config("split_cycle must be nonempty".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> EmotionVocab {
        EmotionVocab::new(
            self.emotions.iter().map(|e| e.name.clone()).collect(),
            self.max_intensity,
        )
        .expect("validated spec produces a valid vocab")
    }
}

/// Canonical 68-landmark unit directions: face looks along +z, +y is up,
/// +x is to the face's left (viewer's right). iBUG-style ordering: jaw 0-16,
/// brows 17-26, nose bridge 27-30, nostrils 31-35, eyes 36-47, outer lips
/// 48-59, inner lips 60-67.
pub fn canonical_landmark_directions() -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(68);
    let push = |dirs: &mut Vec<[f64; 3]>, az_deg: f64, el_deg: f64| {
        let az = az_deg.to_radians();
        let el = el_deg.to_radians();
        dirs.push([el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]);
    };
    // jaw 0-16: U-shaped arc ear to ear through the chin
    for i in 0..17 {
        let t = i as f64 / 16.0;
        let az = -70.0 + 140.0 * t;
        let el = -8.0 - 47.0 * (PI * t).sin();
        push(&mut dirs, az, el);
    }
    // eyebrows 17-21 (face right) and 22-26 (face left)
    for i in 0..5 {
        let t = i as f64 / 4.0;
        push(&mut dirs, -45.0 + 32.0 * t, 25.0 + 4.0 * (PI * t).sin());
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        push(&mut dirs, 13.0 + 32.0 * t, 25.0 + 4.0 * (PI * (1.0 - t)).sin());
    }
    // nose bridge 27-30
    for i in 0..4 {
        let t = i as f64 / 3.0;
        push(&mut dirs, 0.0, 18.0 - 16.0 * t);
    }
    // nostrils 31-35
    for i in 0..5 {
        let t = i as f64 / 4.0;
        push(&mut dirs, -9.0 + 18.0 * t, -4.0 - 2.0 * (PI * t).sin());
    }
    // eyes 36-41 and 42-47: 6-point loops
    for (cx, cy) in [(-25.0, 14.0), (25.0, 14.0)] {
        for i in 0..6 {
            let a = PI + i as f64 * PI / 3.0;
            push(&mut dirs, cx + 8.0 * a.cos(), cy + 4.0 * a.sin());
        }
    }
    // outer lips 48-59: 12-point loop starting at the face-right corner
    for i in 0..12 {
        let a = PI + i as f64 * PI / 6.0;
        push(&mut dirs, 16.0 * a.cos(), -28.0 + 8.0 * a.sin());
    }
    // inner lips 60-67: 8-point loop
    for i in 0..8 {
        let a = PI + i as f64 * PI / 4.0;
        push(&mut dirs, 9.0 * a.cos(), -28.0 + 3.5 * a.sin());
    }
    dirs
}

/// Landmark ids of the outer-lip corners in the canonical layout.
pub const MOUTH_CORNER_IDS: [usize; 2] = [48, 54];

/// Basis fields over the 68 landmarks (unit patterns; scaled by amplitudes).
pub struct BasisFields {
    pub brow: Array2<f64>,
    pub corner: Array2<f64>,
    pub jaw: Array2<f64>,
}

pub fn basis_fields() -> BasisFields {
    let n = 68;
    let mut brow = Array2::zeros((n, 3));
    for i in 17..=26 {
        brow[(i, 1)] = 1.0;
    }
    for i in 36..48 {
        brow[(i, 1)] = 0.3;
    }
    let mut corner = Array2::zeros((n, 3));
    corner[(48, 1)] = 1.0;
    corner[(54, 1)] = 1.0;
    for i in [49, 53, 55, 59, 60, 64] {
        corner[(i, 1)] = 0.5;
    }
    let mut jaw = Array2::zeros((n, 3));
    // chin section of the jaw arc
    for i in 5..=11 {
        let w = 1.0 - ((i as f64 - 8.0) / 4.0).abs();
        jaw[(i, 1)] = -0.9 * w;
    }
    // lower outer lip 55-59, lower inner lip 64-67
    for i in 55..=59 {
        jaw[(i, 1)] = -1.0;
    }
    for i in 64..=67 {
        jaw[(i, 1)] = -0.8;
    }
    // upper lip rises slightly
    for i in 49..=53 {
        jaw[(i, 1)] = 0.15;
    }
    for i in 61..=63 {
        jaw[(i, 1)] = 0.1;
    }
    BasisFields { brow, corner, jaw }
}

/// Emotion field at maximum intensity (N-by-3, mesh units).
pub fn emotion_field(spec: &EmotionFieldSpec, basis: &BasisFields) -> Array2<f64> {
    (&basis.brow * spec.brow + &basis.corner * spec.corner + &basis.jaw * spec.jaw)
        * spec.amplitude
}

/// Cast a ray from the origin through `dir` and return the barycentric anchor
/// of the closest hit triangle (meshes here are star-shaped around the
/// origin, so exactly one front-facing hit exists).
pub fn ray_anchor(mesh: &Mesh, dir: [f64; 3]) -> Result<Anchor> {
    let mut best: Option<(f64, usize, [f64; 3])> = None;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let a = mesh.vertex(f[0]);
        let b = mesh.vertex(f[1]);
        let c = mesh.vertex(f[2]);
        // Moeller-Trumbore with origin 0
        let e1 = crate::mesh::sub3(b, a);
        let e2 = crate::mesh::sub3(c, a);
        let p = crate::mesh::cross3(dir, e2);
        let det = crate::mesh::dot3(e1, p);
        if det.abs() < 1e-14 {
            continue;
        }
        let inv = 1.0 / det;
        let tvec = [-a[0], -a[1], -a[2]];
        let u = crate::mesh::dot3(tvec, p) * inv;
        if !(-1e-9..=1.0 + 1e-9).contains(&u) {
            continue;
        }
        let q = crate::mesh::cross3(tvec, e1);
        let v = crate::mesh::dot3(dir, q) * inv;
        if v < -1e-9 || u + v > 1.0 + 1e-9 {
            continue;
        }
        let t = crate::mesh::dot3(e2, q) * inv;
        if t <= 0.0 {
            continue;
        }
        if best.map(|(bt, _, _)| t < bt).unwrap_or(true) {
            let w0 = (1.0 - u - v).max(0.0);
            let w1 = u.max(0.0);
            let w2 = v.max(0.0);
            let s = w0 + w1 + w2;
            best = Some((t, fi, [w0 / s, w1 / s, w2 / s]));
        }
    }
    let (_, face, bary) = best.ok_or_else(|| {
        CoreError::Numerical(format!("landmark ray {dir:?} missed the mesh"))
    })?;
    Ok(Anchor::Barycentric { face, bary })
}

/// Build the landmark spec (anchors by ray casting + region masks by angular
/// criteria) for one mesh.
pub fn build_landmark_spec(mesh: &Mesh) -> Result<LandmarkSpec> {
    let dirs = canonical_landmark_directions();
    let mut anchors = Vec::with_capacity(dirs.len());
    for d in &dirs {
        anchors.push(ray_anchor(mesh, *d)?);
    }
    let mut regions = BTreeMap::new();
    let mouth_dir = dir_from(0.0, -28.0);
    let mut mouth = Vec::new();
    let mut lips = Vec::new();
    let mut upper = Vec::new();
    for i in 0..mesh.n_vertices() {
        let p = mesh.vertex(i);
        let norm = crate::mesh::norm3(p);
        if norm < 1e-12 {
            continue;
        }
        let u = [p[0] / norm, p[1] / norm, p[2] / norm];
        let mouth_angle = crate::mesh::dot3(u, mouth_dir).clamp(-1.0, 1.0).acos();
        if mouth_angle < 20f64.to_radians() {
            mouth.push(i);
        }
        if mouth_angle < 13f64.to_radians() {
            lips.push(i);
        }
        let elevation = u[1].asin();
        let front = u[2] > 0.15;
        let az = u[0].atan2(u[2]);
        if front && elevation > 6f64.to_radians() && az.abs() < 55f64.to_radians() {
            upper.push(i);
        }
    }
    if mouth.is_empty() || lips.is_empty() || upper.is_empty() {
        return Err(CoreError::Numerical(
            "degenerate region masks on the synthetic mesh".into(),
        ));
    }
    regions.insert("mouth".to_string(), mouth);
    regions.insert("lips".to_string(), lips);
    regions.insert("upper_face".to_string(), upper);
    Ok(LandmarkSpec { anchors, regions })
}

fn dir_from(az_deg: f64, el_deg: f64) -> [f64; 3] {
    let az = az_deg.to_radians();
    let el = el_deg.to_radians();
    [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]
}

/// Row-normalized Gaussian RBF weights from landmark anchor positions to
/// vertices; far vertices keep near-zero weights through the soft floor.
pub fn rbf_weights(mesh: &Mesh, landmark_positions: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let n = mesh.n_vertices();
    let n_lm = landmark_positions.nrows();
    let mut w = Array2::zeros((n, n_lm));
    let two_sigma_sq = 2.0 * sigma * sigma;
    for i in 0..n {
        let p = mesh.vertex(i);
        let mut row_sum = 0.0;
        for j in 0..n_lm {
            let d2 = (0..3)
                .map(|c| (p[c] - landmark_positions[(j, c)]).powi(2))
                .sum::<f64>();
            let k = (-d2 / two_sigma_sq).exp();
            w[(i, j)] = k;
            row_sum += k;
        }
        let denom = row_sum + 0.05;
        for j in 0..n_lm {
            w[(i, j)] /= denom;
        }
    }
    w
}

/// Smooth envelope in [0, 1]: a few random low-frequency sinusoids squashed
/// through a logistic.
fn envelope(t: f64, components: &[(f64, f64, f64)], amplitude: f64) -> f64 {
    if amplitude == 0.0 {
        return 0.0;
    }
    let raw: f64 = components
        .iter()
        .map(|(a, f, phase)| a * (2.0 * PI * f * t + phase).sin())
        .sum();
    amplitude / (1.0 + (-2.5 * raw).exp())
}

struct SequencePlan {
    entry: SequenceEntry,
    env_components: Vec<(f64, f64, f64)>,
    sweeps: Vec<(f64, f64, f64)>, // start freq, rate, phase
}

/// Generate the whole dataset under `out_root`. Returns the manifest.
pub fn synth_data(spec: &SyntheticDatasetSpec, out_root: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_root = out_root.as_ref();
    std::fs::create_dir_all(out_root).map_err(|e| CoreError::io(out_root, e))?;
    let vocab = spec.vocab();
    let basis = basis_fields();

    // identity templates (jittered ellipsoids) + landmark specs + variants
    let mut identities = Vec::new();
    let mut identity_meshes: Vec<Mesh> = Vec::new();
    let mut identity_axes: Vec<[f64; 3]> = Vec::new();
    let mut identity_specs: Vec<LandmarkSpec> = Vec::new();
    let mut identity_styles: Vec<Array2<f64>> = Vec::new();
    for id in 0..spec.identities {
        let mut rng = crate::rng::stream_indexed(spec.seed, "identity", id as u64);
        let jitter = |rng: &mut rand_chacha::ChaCha12Rng| 1.0 + rng.gen_range(-0.04..0.04);
        let axes = [
            spec.base_mesh.axes[0] * jitter(&mut rng),
            spec.base_mesh.axes[1] * jitter(&mut rng),
            spec.base_mesh.axes[2] * jitter(&mut rng),
        ];
        let base = match spec.base_mesh.kind.as_str() {
            "icosphere" => primitives::icosphere(spec.base_mesh.level),
            "uv" => primitives::uv_sphere(spec.base_mesh.rows, spec.base_mesh.cols),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown base mesh kind {other:?} (use \"uv\" or \"icosphere\")"
                )))
            }
        };
        let mesh = primitives::scale_axes(&base, axes[0], axes[1], axes[2]);
        let mesh_rel = format!("meshes/identity_{id}.obj");
        save_mesh(out_root.join(&mesh_rel), &mesh, MeshFormat::Obj)?;
        let lm_spec = build_landmark_spec(&mesh)?;
        let lm_rel = format!("landmarks/identity_{id}.json");
        lm_spec.save(out_root.join(&lm_rel))?;

        let mut variants = Vec::new();
        for &level in &spec.remesh_levels {
            let mut variant = mesh.clone();
            let n_orig_chain = variant.n_vertices();
            let _ = n_orig_chain;
            for _ in 0..level {
                let before = variant.n_vertices();
                variant = variant.subdivide_midpoint();
                // project only the new midpoints back onto the ellipsoid
                let mut verts = variant.vertices().clone();
                for i in before..variant.n_vertices() {
                    let p = [verts[(i, 0)], verts[(i, 1)], verts[(i, 2)]];
                    let s = 1.0
                        / ((p[0] / axes[0]).powi(2)
                            + (p[1] / axes[1]).powi(2)
                            + (p[2] / axes[2]).powi(2))
                        .sqrt();
                    for c in 0..3 {
                        verts[(i, c)] = p[c] * s;
                    }
                }
                variant = variant.with_vertices(verts)?;
            }
            let vmesh_rel = format!("meshes/identity_{id}_sub{level}.obj");
            save_mesh(out_root.join(&vmesh_rel), &variant, MeshFormat::Obj)?;
            let vspec = build_landmark_spec(&variant)?;
            let vlm_rel = format!("landmarks/identity_{id}_sub{level}.json");
            vspec.save(out_root.join(&vlm_rel))?;
            variants.push(VariantEntry {
                level,
                mesh: vmesh_rel,
                landmarks: vlm_rel,
            });
        }

        // identity articulation style: a small smooth random field that rides
        // the envelope, so silent audio still means zero displacement
        let mut style = Array2::zeros((68, 3));
        for v in style.iter_mut() {
            *v = rng.gen_range(-1.0..1.0) * spec.identity_offset_amplitude;
        }

        identities.push(IdentityEntry {
            id,
            mesh: mesh_rel,
            landmarks: lm_rel,
            variants,
        });
        identity_meshes.push(mesh);
        identity_axes.push(axes);
        identity_specs.push(lm_spec);
        identity_styles.push(style);
    }

    // per-sequence plans
    let mut plans = Vec::new();
    let mut global_idx = 0u64;
    for id in 0..spec.identities {
        for local in 0..spec.sequences_per_identity {
            let mut rng = crate::rng::stream_indexed(spec.seed, "sequence", global_idx);
            let duration = rng.gen_range(spec.duration_range[0]..=spec.duration_range[1]);
            // cycle through the vocabulary so every emotion appears
            let emotion = &spec.emotions[local % spec.emotions.len()];
            let intensity = if emotion.name == "neutral" {
                1
            } else {
                rng.gen_range(1..=spec.max_intensity)
            };
            let env_components: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.4..1.0),
                        rng.gen_range(0.8..3.0),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let sweeps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(180.0..900.0),
                        rng.gen_range(-150.0..150.0),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let split = spec.split_cycle[local % spec.split_cycle.len()].clone();
            let entry = SequenceEntry {
                id: format!("id{id:02}_s{local:02}"),
                identity: id,
                emotion: emotion.name.clone(),
                intensity,
                duration,
                split: split.clone(),
                has_dense: spec.dense_frames,
                dense_variants: if spec.dense_frames && spec.variant_dense_splits.contains(&split)
                {
                    spec.remesh_levels.clone()
                } else {
                    vec![]
                },
            };
            plans.push(SequencePlan {
                entry,
                env_components,
                sweeps,
            });
            global_idx += 1;
        }
    }

    // write sequences
    let mut all_train_disp: Vec<Vec<Array2<f64>>> = Vec::new();
    for plan in &plans {
        let entry = &plan.entry;
        let id = entry.identity;
        let mesh = &identity_meshes[id];
        let lm_spec = &identity_specs[id];
        let template_lm = extract_landmarks(mesh, lm_spec)?.positions;
        let emotion = spec
            .emotions
            .iter()
            .find(|e| e.name == entry.emotion)
            .expect("emotion in vocab");
        let emo_field =
            emotion_field(emotion, &basis) * (entry.intensity as f64 / spec.max_intensity as f64);
        let art = &basis.jaw * spec.articulation_amplitude + &identity_styles[id];

        let t_frames = (entry.duration * spec.fps).round() as usize;
        let mut displacement_frames = Vec::with_capacity(t_frames);
        for k in 0..t_frames {
            let t = (k as f64 + 0.5) / spec.fps;
            let env = envelope(t, &plan.env_components, spec.envelope_amplitude);
            displacement_frames.push(&art * env + &emo_field);
        }
        let position_frames: Vec<Array2<f64>> = displacement_frames
            .iter()
            .map(|d| d + &template_lm)
            .collect();

        let dir = Manifest::sequence_dir(out_root, &entry.id);
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;

        // audio: envelope-modulated sum of sine sweeps, peak ~0.45
        let n_samples = (entry.duration * spec.sample_rate as f64).round() as usize;
        let mut samples = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let t = s as f64 / spec.sample_rate as f64;
            let env = envelope(t, &plan.env_components, spec.envelope_amplitude);
            let carrier: f64 = plan
                .sweeps
                .iter()
                .map(|(f0, rate, phase)| (2.0 * PI * (f0 * t + 0.5 * rate * t * t) + phase).sin())
                .sum();
            samples.push(0.45 * env * carrier / plan.sweeps.len() as f64);
        }
        save_audio(
            dir.join("audio.wav"),
            &Waveform {
                samples,
                sample_rate: spec.sample_rate,
            },
        )?;

        write_sequence(
            dir.join("landmarks.ftk"),
            &PackedSequence {
                faces: vec![],
                frames: position_frames,
            },
        )?;

        if entry.has_dense {
            write_dense(
                &dir.join("frames.ftk"),
                mesh,
                &template_lm,
                &displacement_frames,
                spec.rbf_sigma_factor,
            )?;
            for &level in &entry.dense_variants {
                let ident = &identities[id];
                let variant = ident
                    .variants
                    .iter()
                    .find(|v| v.level == level)
                    .expect("variant exists");
                let vmesh = crate::mesh::io::load_mesh(out_root.join(&variant.mesh))?;
                write_dense(
                    &dir.join(format!("frames_sub{level}.ftk")),
                    &vmesh,
                    &template_lm,
                    &displacement_frames,
                    spec.rbf_sigma_factor,
                )?;
            }
        }

        if entry.split == "train" {
            all_train_disp.push(displacement_frames);
        }
    }

    // normalization stats from the train split (fall back to all sequences)
    let std = if all_train_disp.is_empty() {
        [1.0; 3]
    } else {
        displacement_std(&all_train_disp)
    };

    // ground-truth emotion fields for downstream verification
    let fields: BTreeMap<String, Vec<[f64; 3]>> = spec
        .emotions
        .iter()
        .map(|e| {
            let f = emotion_field(e, &basis);
            let rows = (0..68).map(|i| [f[(i, 0)], f[(i, 1)], f[(i, 2)]]).collect();
            (e.name.clone(), rows)
        })
        .collect();
    let fields_doc = serde_json::json!({
        "emotions": fields,
        "upper_face_landmarks": crate::mesh::landmarks::upper_face_landmark_ids(),
        "mouth_landmarks": crate::mesh::landmarks::mouth_landmark_ids(),
    });
    std::fs::write(
        out_root.join(EMOTION_FIELDS_NAME),
        serde_json::to_string_pretty(&fields_doc).expect("serializes"),
    )
    .map_err(|e| CoreError::io(out_root.join(EMOTION_FIELDS_NAME), e))?;

    let manifest = Manifest {
        dataset_id: spec.dataset_id.clone(),
        fps: spec.fps,
        n_landmarks: 68,
        vocab,
        norm_stats: NormStats {
            landmark_disp_std: std,
        },
        identities,
        sequences: plans.into_iter().map(|p| p.entry).collect(),
    };
    manifest.save(out_root)?;
    Ok(manifest)
}

fn write_dense(
    path: &Path,
    mesh: &Mesh,
    template_lm: &Array2<f64>,
    displacement_frames: &[Array2<f64>],
    sigma_factor: f64,
) -> Result<()> {
    let radius = {
        let n = mesh.n_vertices();
        (0..n).map(|i| crate::mesh::norm3(mesh.vertex(i))).sum::<f64>() / n as f64
    };
    let weights = rbf_weights(mesh, template_lm, sigma_factor * radius);
    let frames: Vec<Array2<f64>> = displacement_frames
        .iter()
        .map(|dl| mesh.vertices() + &weights.dot(dl))
        .collect();
    write_sequence(
        path,
        &PackedSequence {
            faces: mesh.faces().to_vec(),
            frames,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout_shape_and_front_hemisphere() {
        let dirs = canonical_landmark_directions();
        assert_eq!(dirs.len(), 68);
        for (i, d) in dirs.iter().enumerate() {
            let norm = crate::mesh::norm3(*d);
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(d[2] > 0.0, "landmark {i} is behind the face");
        }
    }

    #[test]
    fn ray_anchor_centroid_direction_hits_expected_triangle() {
        let mesh = primitives::icosphere(1);
        let anchor = ray_anchor(&mesh, [0.0, 0.0, 1.0]).unwrap();
        match anchor {
            Anchor::Barycentric { face, bary } => {
                assert!(face < mesh.n_faces());
                let s: f64 = bary.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(bary.iter().all(|&b| b >= 0.0));
            }
            _ => panic!("expected barycentric anchor"),
        }
    }

    #[test]
    fn mini_dataset_generates_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDatasetSpec {
            identities: 1,
            sequences_per_identity: 3,
            duration_range: [0.4, 0.6],
            base_mesh: BaseMeshSpec {
                kind: "icosphere".into(),
                level: 2,
                ..Default::default()
            },
            remesh_levels: vec![],
            split_cycle: vec!["train".into(), "val".into(), "test".into()],
            seed: 5,
            ..Default::default()
        };
        let manifest = synth_data(&spec, dir.path()).unwrap();
        assert_eq!(manifest.sequences.len(), 3);
        let reloaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(reloaded.sequences.len(), 3);
        // every sequence loads, T matches round(duration*fps)
        for entry in &reloaded.sequences {
            let seq =
                crate::data::bundle::load_sequence(dir.path(), &reloaded, entry, entry.has_dense)
                    .unwrap();
            let t = seq.landmark_positions.as_ref().unwrap().len();
            assert_eq!(t, (entry.duration * reloaded.fps).round() as usize);
            if entry.has_dense {
                assert_eq!(seq.dense.as_ref().unwrap().n_frames(), t);
            }
        }
        assert!(dir.path().join(EMOTION_FIELDS_NAME).exists());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = SyntheticDatasetSpec {
            identities: 1,
            sequences_per_identity: 2,
            duration_range: [0.4, 0.5],
            base_mesh: BaseMeshSpec {
                kind: "icosphere".into(),
                level: 1,
                ..Default::default()
            },
            remesh_levels: vec![1],
            split_cycle: vec!["train".into(), "test".into()],
            seed: 9,
            ..Default::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        synth_data(&spec, dir_a.path()).unwrap();
        synth_data(&spec, dir_b.path()).unwrap();
        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap()).collect();
                entries.sort_by_key(|e| e.file_name());
                for e in entries {
                    let p = e.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
                        files.push((rel, std::fs::read(&p).unwrap()));
                    }
                }
            }
            files.sort();
            files
        };
        let a = walk(dir_a.path());
        let b = walk(dir_b.path());
        assert_eq!(a.len(), b.len());
        for ((na, ba), (nb, bb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ba, bb, "file {na} differs between regenerations");
        }
    }

    #[test]
    fn zero_envelope_with_neutral_emotion_means_zero_motion() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticDatasetSpec {
            identities: 1,
            sequences_per_identity: 1,
            duration_range: [0.5, 0.5],
            emotions: vec![EmotionFieldSpec::default()],
            envelope_amplitude: 0.0,
            dense_frames: false,
            remesh_levels: vec![],
            base_mesh: BaseMeshSpec {
                kind: "icosphere".into(),
                level: 1,
                ..Default::default()
            },
            split_cycle: vec!["train".into()],
            seed: 3,
            ..Default::default()
        };
        let manifest = synth_data(&spec, dir.path()).unwrap();
        let entry = &manifest.sequences[0];
        let seq = crate::data::bundle::load_sequence(dir.path(), &manifest, entry, false).unwrap();
        let mesh = crate::mesh::io::load_mesh(dir.path().join(&manifest.identities[0].mesh)).unwrap();
        let lm_spec =
            LandmarkSpec::load(dir.path().join(&manifest.identities[0].landmarks)).unwrap();
        let template = extract_landmarks(&mesh, &lm_spec).unwrap().positions;
        for frame in seq.landmark_positions.unwrap() {
            for (a, b) in frame.iter().zip(template.iter()) {
                // stored at f32 precision
                assert!((a - b).abs() < 1e-6, "motion where none expected");
            }
        }
        // audio is exactly silent
        let wave = crate::audio::load_audio(
            Manifest::sequence_dir(dir.path(), &entry.id).join("audio.wav"),
        )
        .unwrap();
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn emotion_fields_differ_by_the_configured_offsets() {
        let basis = basis_fields();
        let emotions = default_emotions();
        let happy = emotion_field(&emotions[1], &basis);
        let sad = emotion_field(&emotions[2], &basis);
        // upper-face mean displacement has opposite sign on y
        let upper = crate::mesh::landmarks::upper_face_landmark_ids();
        let mean_y = |f: &Array2<f64>| -> f64 {
            upper.iter().map(|&i| f[(i, 1)]).sum::<f64>() / upper.len() as f64
        };
        assert!(mean_y(&happy) > 1e-4);
        assert!(mean_y(&sad) < -1e-4);
        assert!((mean_y(&happy) + mean_y(&sad)).abs() < 1e-12, "symmetric fields");
    }

    #[test]
    fn rbf_weights_are_local_and_bounded() {
        let mesh = primitives::icosphere(2);
        let dirs = canonical_landmark_directions();
        let lm = Array2::from_shape_fn((dirs.len(), 3), |(i, c)| dirs[i][c]);
        let w = rbf_weights(&mesh, &lm, 0.3);
        for i in 0..mesh.n_vertices() {
            let row_sum: f64 = (0..dirs.len()).map(|j| w[(i, j)]).sum();
            assert!(row_sum <= 1.0 + 1e-9);
            assert!((0..dirs.len()).all(|j| w[(i, j)] >= 0.0));
        }
        // a back-of-head vertex gets almost no weight
        let back = (0..mesh.n_vertices())
            .min_by(|&a, &b| mesh.vertex(a)[2].total_cmp(&mesh.vertex(b)[2]))
            .unwrap();
        let back_sum: f64 = (0..dirs.len()).map(|j| w[(back, j)]).sum();
        assert!(back_sum < 0.05, "back vertex weight {back_sum}");
    }
}
