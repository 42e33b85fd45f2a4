//! STM training loop: window-chunked sequence training with the dense motion
//! loss, per-epoch validation on full sequences, best-validation checkpoint.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::{write_resolved, StmTrainConfig};
use crate::data::bundle::Manifest;
use crate::data::cache::{content_key, Cache};
use crate::data::checkpoint::{save_checkpoint, CheckpointHeader};
use crate::error::{CoreError, Result};
use crate::mesh::landmarks::default_landmark_graph;
use crate::mesh::operators::{build_operators, SurfaceOperators};
use crate::mesh::Mesh;
use crate::metrics::LossWeights;
use crate::nn::optim::AdamW;
use crate::nn::params::ParamStore;
use crate::stm::intrinsic::MeshBundle;
use crate::stm::{stm_loss, stm_training_step, StmConfig, StmModel};
use crate::train::{
    assets_for, displacement_frames, load_identity_assets, shuffled_indices, write_log, EpochLog,
};

pub struct StmTrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub best_val_loss: f64,
}

struct PreparedSequence {
    identity: usize,
    /// Landmark displacement frames (N-by-3).
    landmark_disp: Vec<Array2<f64>>,
    /// Dense displacement frames (n-by-3).
    dense_disp: Vec<Array2<f64>>,
}

/// Build mesh operators with the spectral basis, caching the eigensolve by
/// mesh content and k.
pub fn operators_with_cached_spectral(
    mesh: &Mesh,
    mesh_bytes: &[u8],
    k: usize,
    cache: &Cache,
) -> Result<SurfaceOperators> {
    let key = content_key("spectral", &[mesh_bytes, &(k as u64).to_le_bytes()]);
    if let Some(basis) = cache.get_spectral(&key) {
        let mut ops = build_operators(mesh, None)?;
        if basis.basis.nrows() == mesh.n_vertices() {
            ops.spectral = Some(basis);
            return Ok(ops);
        }
    }
    let ops = build_operators(mesh, Some(k))?;
    if let Some(b) = &ops.spectral {
        cache.put_spectral(&key, b);
    }
    Ok(ops)
}

pub fn train_stm(config: &StmTrainConfig) -> Result<StmTrainOutcome> {
    config.validate()?;
    let root = Path::new(&config.dataset);
    let out_dir = Path::new(&config.out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    write_resolved(out_dir, config)?;

    let manifest = Manifest::load(root)?;
    if manifest.n_landmarks != crate::mesh::landmarks::DEFAULT_LANDMARK_COUNT {
        return Err(CoreError::Validation(format!(
            "STM training expects the default 68-landmark layout, manifest has {}",
            manifest.n_landmarks
        )));
    }
    let cache = Cache::from_env();
    let assets = load_identity_assets(root, &manifest)?;

    // per-identity operators + bundles
    let mut bundles: Vec<(usize, MeshBundle)> = Vec::new();
    let mut time_init_acc = 0.0;
    for ident in &manifest.identities {
        let a = assets_for(&assets, ident.id)?;
        let mesh_bytes =
            std::fs::read(root.join(&ident.mesh)).map_err(|e| CoreError::io(&ident.mesh, e))?;
        let ops =
            operators_with_cached_spectral(&a.mesh, &mesh_bytes, config.spectral_k, &cache)?;
        time_init_acc += ops.mean_edge_length * ops.mean_edge_length;
        let bundle = MeshBundle::new(&a.mesh, &ops, config.gradient_features)?;
        bundles.push((ident.id, bundle));
    }
    let time_init = config
        .diffusion_time_init
        .unwrap_or(time_init_acc / manifest.identities.len() as f64);

    let prepare = |split: &str| -> Result<Vec<PreparedSequence>> {
        let mut out = Vec::new();
        for entry in manifest.split(split) {
            if !entry.has_dense {
                continue;
            }
            let seq = crate::data::bundle::load_sequence(root, &manifest, entry, true)?;
            let ident = assets_for(&assets, entry.identity)?;
            let dense = seq.dense.as_ref().expect("has_dense sequences carry frames");
            if dense.faces != ident.mesh.faces() {
                return Err(CoreError::Validation(format!(
                    "sequence {}: dense connectivity differs from the identity template",
                    entry.id
                )));
            }
            let landmark_disp = displacement_frames(&seq, &ident.template_landmarks)?;
            let t = landmark_disp.len().min(dense.frames.len());
            let dense_disp: Vec<Array2<f64>> = dense.frames[..t]
                .iter()
                .map(|f| f - ident.mesh.vertices())
                .collect();
            out.push(PreparedSequence {
                identity: entry.identity,
                landmark_disp: landmark_disp[..t].to_vec(),
                dense_disp,
            });
        }
        Ok(out)
    };
    let train_seqs = prepare("train")?;
    let val_seqs = prepare("val")?;
    if train_seqs.is_empty() {
        return Err(CoreError::Validation(
            "no training sequences with dense frames".into(),
        ));
    }

    // scale landmark inputs to ~unit size and let the zero-initialized
    // decoder head work in units of the dense displacement std
    let mean_landmark_std = manifest
        .norm_stats
        .landmark_disp_std
        .iter()
        .sum::<f64>()
        / 3.0;
    let input_scale = 1.0 / mean_landmark_std.max(1e-9);
    let dense_std = {
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in &train_seqs {
            for f in &s.dense_disp {
                for v in f.iter() {
                    sq += v * v;
                    count += 1;
                }
            }
        }
        (sq / count.max(1) as f64).sqrt().max(1e-9)
    };

    let stm_config = StmConfig {
        n_landmarks: manifest.n_landmarks,
        feature_width: config.feature_width,
        attention_width: config.attention_width,
        attention_heads: config.attention_heads,
        gcn_layers: config.gcn_layers,
        gcn_hidden: config.gcn_hidden,
        positional_width: config.positional_width,
        encoder_blocks: config.encoder_blocks,
        decoder_blocks: config.decoder_blocks,
        spectral_k: config.spectral_k,
        gradient_features: config.gradient_features,
        feature_combination: config.feature_combination,
        decoder: config.decoder,
        diffusion_time_init: time_init,
        input_scale,
        output_scale: dense_std,
    };
    let mut store = ParamStore::new();
    let mut init_rng = crate::rng::stream(config.seed, "stm-init");
    let model = StmModel::new(
        &mut store,
        stm_config,
        default_landmark_graph().normalized_adjacency(),
        &mut init_rng,
    )?;
    let weights = LossWeights::new(config.loss_velocity, config.loss_acceleration)?;
    let mut optimizer = AdamW::new(
        &store,
        config.learning_rate,
        config.weight_decay,
        Some(config.grad_clip),
    );

    let bundle_for = |id: usize| -> &MeshBundle {
        &bundles.iter().find(|(bid, _)| *bid == id).expect("bundle built").1
    };

    let eval_loss = |store: &ParamStore, seqs: &[PreparedSequence]| -> Result<f64> {
        if seqs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for s in seqs {
            let (fields, _) =
                model.stm_forward(store, bundle_for(s.identity), &s.landmark_disp, false)?;
            total += stm_loss(&fields, &s.dense_disp, &weights)?;
        }
        Ok(total / seqs.len() as f64)
    };
    let eval_pos_loss = |store: &ParamStore, seqs: &[PreparedSequence]| -> Result<f64> {
        let zero = LossWeights {
            velocity: 0.0,
            acceleration: 0.0,
        };
        let mut total = 0.0;
        for s in seqs {
            let (fields, _) =
                model.stm_forward(store, bundle_for(s.identity), &s.landmark_disp, false)?;
            total += stm_loss(&fields, &s.dense_disp, &zero)?;
        }
        Ok(total / seqs.len() as f64)
    };

    let checkpoint_path = out_dir.join("stm.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let header = CheckpointHeader::new(
        "stm",
        serde_json::to_value(&model.config).expect("config serializes"),
        manifest.n_landmarks,
        manifest.fps,
    );

    let mut rows = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut steps_run = 0usize;
    let mut epochs_run = 0usize;
    let mut stop = false;
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        let order = shuffled_indices(train_seqs.len(), config.seed, "stm-order", epoch);
        let mut epoch_loss = 0.0;
        let mut windows = 0usize;
        for &si in &order {
            let s = &train_seqs[si];
            let bundle = bundle_for(s.identity);
            let t = s.landmark_disp.len();
            let mut start = 0;
            while start < t {
                let end = (start + config.train_window).min(t);
                store.zero_grads();
                let loss = stm_training_step(
                    &mut store,
                    &model,
                    bundle,
                    &s.landmark_disp[start..end],
                    &s.dense_disp[start..end],
                    &weights,
                )?;
                optimizer.step(&mut store);
                epoch_loss += loss;
                windows += 1;
                steps_run += 1;
                start = end;
                if config.max_steps.map(|m| steps_run >= m).unwrap_or(false) {
                    stop = true;
                    break;
                }
            }
            if stop {
                break;
            }
        }
        let train_loss = epoch_loss / windows.max(1) as f64;
        let train_pos = eval_pos_loss(&store, &train_seqs)?;
        let val_loss = if val_seqs.is_empty() {
            eval_loss(&store, &train_seqs)?
        } else {
            eval_loss(&store, &val_seqs)?
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(CoreError::Numerical(format!(
                "non-finite loss at epoch {epoch}: train {train_loss}, val {val_loss}"
            )));
        }
        rows.push(EpochLog {
            epoch,
            steps: steps_run,
            train_loss,
            train_pos_loss: train_pos,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            save_checkpoint(&checkpoint_path, header.clone(), &store)?;
        }
        if stop {
            break;
        }
    }
    if !checkpoint_path.exists() {
        save_checkpoint(&checkpoint_path, header, &store)?;
    }
    write_log(&log_path, &rows)?;
    Ok(StmTrainOutcome {
        checkpoint: checkpoint_path,
        log: log_path,
        epochs_run,
        steps_run,
        best_val_loss: best_val,
    })
}

/// Rebuild an STM model from a checkpoint.
pub struct LoadedStm {
    pub store: ParamStore,
    pub model: StmModel,
    pub n_landmarks: usize,
    pub fps: f64,
}

pub fn load_stm_checkpoint(path: impl AsRef<Path>) -> Result<LoadedStm> {
    let path = path.as_ref();
    let (header, tensors) = crate::data::checkpoint::load_checkpoint(path)?;
    if header.section != "stm" {
        return Err(CoreError::Validation(format!(
            "{} holds section {:?}, expected \"stm\"",
            path.display(),
            header.section
        )));
    }
    let config: StmConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| CoreError::parse(path, format!("stm config: {e}")))?;
    if config.n_landmarks != crate::mesh::landmarks::DEFAULT_LANDMARK_COUNT {
        return Err(CoreError::Validation(format!(
            "stm checkpoint has N = {}, only the default 68-landmark graph is supported",
            config.n_landmarks
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(0, "stm-load");
    let model = StmModel::new(
        &mut store,
        config,
        default_landmark_graph().normalized_adjacency(),
        &mut rng,
    )?;
    store.import(&tensors)?;
    Ok(LoadedStm {
        store,
        model,
        n_landmarks: header.n_landmarks,
        fps: header.fps,
    })
}
