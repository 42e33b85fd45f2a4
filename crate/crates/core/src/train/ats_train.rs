//! ATS training loop: per-item diffusion loss, AdamW, per-epoch validation,
//! best-validation checkpoint selection, CSV logging.

use std::path::{Path, PathBuf};

use crate::ats::denoiser::{Denoiser, DenoiserConfig};
use crate::ats::loss::{ats_loss, ats_training_step, AtsItem};
use crate::ats::schedule::make_schedule;
use crate::config::{write_resolved, AtsTrainConfig};
use crate::data::bundle::Manifest;
use crate::data::cache::Cache;
use crate::data::checkpoint::{save_checkpoint, CheckpointHeader, ScheduleSpec};
use crate::error::{CoreError, Result};
use crate::metrics::LossWeights;
use crate::nn::optim::AdamW;
use crate::nn::params::ParamStore;
use crate::train::{
    aligned_features, assets_for, derive_seed, displacement_frames, load_identity_assets,
    shuffled_indices, write_log, EpochLog,
};

pub struct AtsTrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub best_val_loss: f64,
    /// Train positional-only loss at the end of epoch 1 and its minimum over
    /// the run (the overfit criterion compares these).
    pub epoch1_pos_loss: f64,
    pub min_pos_loss: f64,
}

struct PreparedItem {
    x0: crate::nn::tape::Mat,
    audio: crate::nn::tape::Mat,
    affect: crate::ats::AffectLabel,
    dataset_index: u64,
}

pub fn train_ats(config: &AtsTrainConfig) -> Result<AtsTrainOutcome> {
    config.validate()?;
    let root = Path::new(&config.dataset);
    let out_dir = Path::new(&config.out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    write_resolved(out_dir, config)?;

    let manifest = Manifest::load(root)?;
    let cache = Cache::from_env();
    let assets = load_identity_assets(root, &manifest)?;
    let stats = &manifest.norm_stats;

    let prepare = |split: &str| -> Result<Vec<PreparedItem>> {
        let mut items = Vec::new();
        for (ds_idx, entry) in manifest.sequences.iter().enumerate() {
            if entry.split != split {
                continue;
            }
            let seq = crate::data::bundle::load_sequence(root, &manifest, entry, false)?;
            let ident = assets_for(&assets, entry.identity)?;
            let disp = displacement_frames(&seq, &ident.template_landmarks)?;
            let x0_raw = crate::ats::flatten_frames(&disp);
            let x0 = stats.normalize(&x0_raw);
            let audio = aligned_features(&seq.audio_path, &config.features, manifest.fps, &cache)?;
            // frame-count contract: truncate both streams to the minimum
            let t = x0.nrows().min(audio.nrows());
            if x0.nrows().abs_diff(audio.nrows()) > 1 {
                return Err(CoreError::Validation(format!(
                    "sequence {}: {} motion frames vs {} audio frames",
                    entry.id,
                    x0.nrows(),
                    audio.nrows()
                )));
            }
            let x0 = x0.slice(ndarray::s![0..t, ..]).to_owned();
            let audio = audio.slice(ndarray::s![0..t, ..]).to_owned();
            let affect = manifest.vocab.label(&entry.emotion, entry.intensity)?;
            items.push(PreparedItem {
                x0,
                audio,
                affect,
                dataset_index: ds_idx as u64,
            });
        }
        Ok(items)
    };
    let train_items = prepare("train")?;
    let val_items = prepare("val")?;
    if train_items.is_empty() {
        return Err(CoreError::Validation("no training sequences in dataset".into()));
    }

    let audio_dim = train_items[0].audio.ncols();
    let motion_dim = 3 * manifest.n_landmarks;
    let den_config = DenoiserConfig {
        motion_dim,
        audio_dim,
        d_model: config.d_model,
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        t_max: config.t_max,
        dropout: config.dropout,
        band_radius: config.band_radius,
        n_emotions: manifest.vocab.len(),
        max_intensity: manifest.vocab.max_intensity,
    };
    for item in train_items.iter().chain(&val_items) {
        if item.x0.nrows() > config.t_max {
            return Err(CoreError::Validation(format!(
                "sequence length {} exceeds t_max {}",
                item.x0.nrows(),
                config.t_max
            )));
        }
    }

    let mut store = ParamStore::new();
    let mut init_rng = crate::rng::stream(config.seed, "ats-init");
    let denoiser = Denoiser::new(&mut store, den_config, &mut init_rng)?;
    let schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
    let weights = LossWeights::new(config.loss_velocity, config.loss_acceleration)?;
    let pos_only = LossWeights {
        velocity: 0.0,
        acceleration: 0.0,
    };
    let mut optimizer = AdamW::new(
        &store,
        config.learning_rate,
        config.weight_decay,
        Some(config.grad_clip),
    );
    let mut dropout_rng = crate::rng::stream(config.seed, "ats-dropout");

    // evaluation items carry frozen noise seeds so epochs are comparable
    let eval_items = |items: &[PreparedItem], label: &str| -> Vec<AtsItem> {
        items
            .iter()
            .map(|p| AtsItem {
                x0: p.x0.clone(),
                audio: p.audio.clone(),
                affect: p.affect,
                noise_seed: derive_seed(config.seed, label, p.dataset_index, 0),
            })
            .collect()
    };
    let train_eval = eval_items(&train_items, "ats-eval-train");
    let val_eval = eval_items(&val_items, "ats-eval-val");

    let checkpoint_path = out_dir.join("ats.ckpt");
    let log_path = out_dir.join("train_log.csv");
    let header = |store_fps: f64| {
        let mut h = CheckpointHeader::new(
            "ats",
            serde_json::to_value(&denoiser.config).expect("config serializes"),
            manifest.n_landmarks,
            store_fps,
        );
        h.vocab = Some(manifest.vocab.clone());
        h.norm_stats = Some(stats.landmark_disp_std);
        h.schedule = Some(ScheduleSpec {
            timesteps: config.diffusion_steps,
            beta_start: config.beta_start,
            beta_end: config.beta_end,
        });
        h.features = Some(config.features.clone());
        h
    };

    let mut rows: Vec<EpochLog> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut epoch1_pos = f64::NAN;
    let mut min_pos = f64::INFINITY;
    let mut steps_run = 0usize;
    let mut epochs_run = 0usize;
    let mut stop = false;

    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        let order = shuffled_indices(train_items.len(), config.seed, "ats-order", epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<AtsItem> = chunk
                .iter()
                .map(|&i| {
                    let p = &train_items[i];
                    AtsItem {
                        x0: p.x0.clone(),
                        audio: p.audio.clone(),
                        affect: p.affect,
                        noise_seed: derive_seed(
                            config.seed,
                            "ats-noise",
                            epoch as u64,
                            p.dataset_index,
                        ),
                    }
                })
                .collect();
            store.zero_grads();
            let loss = ats_training_step(
                &mut store,
                &denoiser,
                &schedule,
                &batch,
                &weights,
                &mut dropout_rng,
            )?;
            optimizer.step(&mut store);
            epoch_loss += loss;
            batches += 1;
            steps_run += 1;
            if config.max_steps.map(|m| steps_run >= m).unwrap_or(false) {
                stop = true;
                break;
            }
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(CoreError::Numerical(format!(
                "non-finite training loss at epoch {epoch}: {train_loss}"
            )));
        }
        let evaluate_now =
            epoch == 1 || epoch % config.eval_every == 0 || epoch == config.epochs || stop;
        if evaluate_now {
            let train_pos = ats_loss(&store, &denoiser, &schedule, &train_eval, &pos_only)?;
            let val_loss = if val_eval.is_empty() {
                ats_loss(&store, &denoiser, &schedule, &train_eval, &weights)?
            } else {
                ats_loss(&store, &denoiser, &schedule, &val_eval, &weights)?
            };
            if !val_loss.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "non-finite validation loss at epoch {epoch}: {val_loss}"
                )));
            }
            if epoch == 1 {
                epoch1_pos = train_pos;
            }
            min_pos = min_pos.min(train_pos);
            rows.push(EpochLog {
                epoch,
                steps: steps_run,
                train_loss,
                train_pos_loss: train_pos,
                val_loss,
            });
            if val_loss < best_val {
                best_val = val_loss;
                save_checkpoint(&checkpoint_path, header(manifest.fps), &store)?;
            }
            if let Some(ratio) = config.target_pos_ratio {
                if epoch > 1 && train_pos < ratio * epoch1_pos {
                    stop = true;
                }
            }
        }
        if stop {
            break;
        }
    }
    if !checkpoint_path.exists() {
        save_checkpoint(&checkpoint_path, header(manifest.fps), &store)?;
    }
    write_log(&log_path, &rows)?;
    Ok(AtsTrainOutcome {
        checkpoint: checkpoint_path,
        log: log_path,
        epochs_run,
        steps_run,
        best_val_loss: best_val,
        epoch1_pos_loss: epoch1_pos,
        min_pos_loss: min_pos,
    })
}

/// Rebuild a denoiser (and its sampling context) from a checkpoint.
pub struct LoadedAts {
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub schedule: crate::ats::schedule::DiffusionSchedule,
    pub vocab: crate::ats::EmotionVocab,
    pub norm_stats: crate::data::bundle::NormStats,
    pub features: crate::audio::FeatureConfig,
    pub fps: f64,
    pub n_landmarks: usize,
}

pub fn load_ats_checkpoint(path: impl AsRef<Path>) -> Result<LoadedAts> {
    let path = path.as_ref();
    let (header, tensors) = crate::data::checkpoint::load_checkpoint(path)?;
    if header.section != "ats" {
        return Err(CoreError::Validation(format!(
            "{} holds section {:?}, expected \"ats\"",
            path.display(),
            header.section
        )));
    }
    let config: DenoiserConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| CoreError::parse(path, format!("denoiser config: {e}")))?;
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(0, "ats-load");
    let denoiser = Denoiser::new(&mut store, config, &mut rng)?;
    store.import(&tensors)?;
    let sched = header
        .schedule
        .as_ref()
        .ok_or_else(|| CoreError::Validation("ats checkpoint missing schedule".into()))?;
    let schedule = make_schedule(sched.timesteps, sched.beta_start, sched.beta_end)?;
    let vocab = header
        .vocab
        .clone()
        .ok_or_else(|| CoreError::Validation("ats checkpoint missing vocabulary".into()))?;
    let norm = header
        .norm_stats
        .ok_or_else(|| CoreError::Validation("ats checkpoint missing norm stats".into()))?;
    Ok(LoadedAts {
        store,
        denoiser,
        schedule,
        vocab,
        norm_stats: crate::data::bundle::NormStats {
            landmark_disp_std: norm,
        },
        features: header.features.clone().unwrap_or_default(),
        fps: header.fps,
        n_landmarks: header.n_landmarks,
    })
}
