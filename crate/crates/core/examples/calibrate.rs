// Temporary calibration harness for overfit experiment configs.

use freetalk_core::ats::sampler::{ddim_sample, SamplerConfig};
use freetalk_core::ats::unflatten_frames;
use freetalk_core::config::{AtsTrainConfig, StmTrainConfig};
use freetalk_core::data::bundle::Manifest;
use freetalk_core::data::synth::{synth_data, BaseMeshSpec, SyntheticDatasetSpec};
use freetalk_core::train::ats_train::{load_ats_checkpoint, train_ats};
use freetalk_core::train::stm_train::{load_stm_checkpoint, operators_with_cached_spectral, train_stm};
use freetalk_core::train::{aligned_features, displacement_frames, load_identity_assets};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "a3".into());
    match which.as_str() {
        "a3" => calibrate_a3(),
        "a4" => calibrate_a4(),
        _ => eprintln!("unknown mode"),
    }
}

fn calibrate_a3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let t0 = std::time::Instant::now();
    let spec = SyntheticDatasetSpec {
        identities: 1,
        sequences_per_identity: 4,
        duration_range: [2.3, 2.5],
        base_mesh: BaseMeshSpec {
            kind: "icosphere".into(),
            level: 2,
            ..Default::default()
        },
        dense_frames: false,
        remesh_levels: vec![],
        split_cycle: vec!["train".into()],
        seed: 1234,
        ..Default::default()
    };
    let manifest = synth_data(&spec, &data).unwrap();
    println!("synth: {:?}", t0.elapsed());

    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-4);
    let config = AtsTrainConfig {
        dataset: data.to_string_lossy().into(),
        out_dir: dir.path().join("run").to_string_lossy().into(),
        seed: 7,
        epochs: 2000,
        batch_size: 4,
        learning_rate: lr,
        dropout: 0.0,
        d_model: 128,
        n_layers: 2,
        n_heads: 8,
        d_ff: 512,
        t_max: 80,
        diffusion_steps: 1000,
        max_steps: Some(2000),
        target_pos_ratio: None,
        eval_every: 25,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = train_ats(&config).unwrap();
    println!(
        "lr {lr}: steps {}, epoch1_pos {:.4e}, min_pos {:.4e}, ratio {:.3}, time {:?}",
        outcome.steps_run,
        outcome.epoch1_pos_loss,
        outcome.min_pos_loss,
        outcome.min_pos_loss / outcome.epoch1_pos_loss,
        t0.elapsed()
    );

    // sampling check
    let ats = load_ats_checkpoint(&outcome.checkpoint).unwrap();
    let assets = load_identity_assets(&data, &manifest).unwrap();
    let entry = &manifest.sequences[0];
    let seq = freetalk_core::data::bundle::load_sequence(&data, &manifest, entry, false).unwrap();
    let gt_disp = displacement_frames(&seq, &assets[0].template_landmarks).unwrap();
    let cache = freetalk_core::data::cache::Cache::disabled();
    let audio = aligned_features(&seq.audio_path, &ats.features, manifest.fps, &cache).unwrap();
    let t = gt_disp.len().min(audio.nrows());
    let audio = audio.slice(ndarray::s![0..t, ..]).to_owned();
    let affect = ats.vocab.label(&entry.emotion, entry.intensity).unwrap();
    let t1 = std::time::Instant::now();
    let sampled = ddim_sample(
        &ats.store,
        &ats.denoiser,
        &ats.schedule,
        &SamplerConfig {
            ddim_steps: 100,
            band_radius: 2,
            seed: 5,
        },
        &audio,
        affect,
    )
    .unwrap();
    println!("sampling time {:?}", t1.elapsed());
    let denorm = ats.norm_stats.denormalize(&sampled);
    let frames = unflatten_frames(&denorm, manifest.n_landmarks);
    let mut err_sum = 0.0;
    let mut count = 0usize;
    let mut peak = 0f64;
    for (pred, gt) in frames.iter().zip(&gt_disp) {
        for i in 0..manifest.n_landmarks {
            let e = ((pred[(i, 0)] - gt[(i, 0)]).powi(2)
                + (pred[(i, 1)] - gt[(i, 1)]).powi(2)
                + (pred[(i, 2)] - gt[(i, 2)]).powi(2))
            .sqrt();
            err_sum += e;
            count += 1;
            let mag = (gt[(i, 0)].powi(2) + gt[(i, 1)].powi(2) + gt[(i, 2)].powi(2)).sqrt();
            peak = peak.max(mag);
        }
    }
    let mean_err = err_sum / count as f64;
    println!(
        "per-landmark mean error {:.4e}, peak amplitude {:.4e}, ratio {:.3}",
        mean_err,
        peak,
        mean_err / peak
    );
}

fn calibrate_a4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let t0 = std::time::Instant::now();
    let spec = SyntheticDatasetSpec {
        identities: 1,
        sequences_per_identity: 6,
        duration_range: [1.2, 1.6],
        base_mesh: BaseMeshSpec {
            kind: "uv".into(),
            rows: 30,
            cols: 50,
            ..Default::default()
        },
        remesh_levels: vec![1],
        variant_dense_splits: vec!["test".into()],
        split_cycle: vec![
            "train".into(),
            "train".into(),
            "train".into(),
            "train".into(),
            "val".into(),
            "test".into(),
        ],
        seed: 99,
        ..Default::default()
    };
    let manifest = synth_data(&spec, &data).unwrap();
    println!("synth: {:?} ({} verts)", t0.elapsed(), 30 * 50 + 2);

    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let epochs: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let wd: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-2);
    let config = StmTrainConfig {
        dataset: data.to_string_lossy().into(),
        out_dir: dir.path().join("run").to_string_lossy().into(),
        seed: 3,
        epochs,
        learning_rate: lr,
        weight_decay: wd,
        feature_width: 32,
        attention_width: 32,
        attention_heads: 4,
        gcn_layers: 3,
        gcn_hidden: 32,
        positional_width: 16,
        encoder_blocks: 2,
        decoder_blocks: 2,
        spectral_k: 64,
        train_window: 10,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = train_stm(&config).unwrap();
    println!(
        "lr {lr}, epochs {epochs}: steps {}, best val {:.4e}, time {:?}",
        outcome.steps_run, outcome.best_val_loss, t0.elapsed()
    );
    let log = std::fs::read_to_string(&outcome.log).unwrap();
    for line in log.lines().skip(1).step_by(5) {
        println!("  {line}");
    }

    // test error on the base mesh
    let stm = load_stm_checkpoint(&outcome.checkpoint).unwrap();
    let assets = load_identity_assets(&data, &manifest).unwrap();
    let entry = manifest
        .sequences
        .iter()
        .find(|s| s.split == "test")
        .unwrap();
    let seq = freetalk_core::data::bundle::load_sequence(&data, &manifest, entry, true).unwrap();
    let gt = seq.dense.as_ref().unwrap();
    let lm_disp = displacement_frames(&seq, &assets[0].template_landmarks).unwrap();
    let cache = freetalk_core::data::cache::Cache::disabled();
    let mesh = &assets[0].mesh;
    let mesh_bytes = std::fs::read(data.join(&manifest.identities[0].mesh)).unwrap();
    let ops = operators_with_cached_spectral(mesh, &mesh_bytes, 64, &cache).unwrap();
    let bundle = freetalk_core::stm::intrinsic::MeshBundle::new(mesh, &ops, false).unwrap();
    let t1 = std::time::Instant::now();
    let (fields, _) = stm.model.stm_forward(&stm.store, &bundle, &lm_disp, false).unwrap();
    println!("base forward {:?}", t1.elapsed());
    let mut err_sum = 0.0;
    let mut count = 0;
    let mut peak = 0f64;
    for (t, dv) in fields.iter().enumerate() {
        let gt_frame = &gt.frames[t];
        for i in 0..mesh.n_vertices() {
            let mut e = 0.0;
            let mut mag = 0.0;
            for c in 0..3 {
                let pred = mesh.vertices()[(i, c)] + dv[(i, c)];
                let d = pred - gt_frame[(i, c)];
                e += d * d;
                let m = gt_frame[(i, c)] - mesh.vertices()[(i, c)];
                mag += m * m;
            }
            err_sum += e.sqrt();
            count += 1;
            peak = peak.max(mag.sqrt());
        }
    }
    let base_err = err_sum / count as f64;
    println!(
        "base test error {:.4e}, peak {:.4e}, ratio {:.3}",
        base_err,
        peak,
        base_err / peak
    );

    // subdivided variant
    let ident = &manifest.identities[0];
    let variant = &ident.variants[0];
    let vmesh = freetalk_core::mesh::io::load_mesh(data.join(&variant.mesh)).unwrap();
    let vbytes = std::fs::read(data.join(&variant.mesh)).unwrap();
    let t2 = std::time::Instant::now();
    let vops = operators_with_cached_spectral(&vmesh, &vbytes, 64, &cache).unwrap();
    println!("variant ops ({} verts): {:?}", vmesh.n_vertices(), t2.elapsed());
    let vbundle = freetalk_core::stm::intrinsic::MeshBundle::new(&vmesh, &vops, false).unwrap();
    let t3 = std::time::Instant::now();
    let (vfields, _) = stm.model.stm_forward(&stm.store, &vbundle, &lm_disp, false).unwrap();
    println!("variant forward {:?}", t3.elapsed());
    let vgt = freetalk_core::data::bundle::load_variant_dense(&data, entry, 1).unwrap();
    let n_orig = mesh.n_vertices();
    let mut verr = 0.0;
    let mut vcount = 0;
    for (t, dv) in vfields.iter().enumerate() {
        for i in 0..n_orig {
            let mut e = 0.0;
            for c in 0..3 {
                let pred = vmesh.vertices()[(i, c)] + dv[(i, c)];
                e += (pred - vgt.frames[t][(i, c)]).powi(2);
            }
            verr += e.sqrt();
            vcount += 1;
        }
    }
    let sub_err = verr / vcount as f64;
    println!(
        "subdivided error at original vertices {:.4e} = {:.2}x base",
        sub_err,
        sub_err / base_err
    );
}
