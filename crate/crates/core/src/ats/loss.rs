//! Diffusion training loss: per item, sample a timestep and noise, corrupt
//! the clean trajectory, denoise, and apply the unified motion loss between
//! the clean trajectory and the reconstruction.

use rand::Rng;
use rand_distr::Distribution;

use crate::ats::denoiser::Denoiser;
use crate::ats::schedule::{forward_diffuse, DiffusionSchedule};
use crate::ats::AffectLabel;
use crate::error::Result;
use crate::metrics::LossWeights;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Mat, Tape, Var};

/// One training item. `noise_seed` fully determines the timestep draw and the
/// Gaussian noise, so per-item losses do not depend on batch order.
#[derive(Debug, Clone)]
pub struct AtsItem {
    /// Normalized displacement trajectory, T-by-D.
    pub x0: Mat,
    /// Frame-aligned audio features, T-by-C.
    pub audio: Mat,
    pub affect: AffectLabel,
    pub noise_seed: u64,
}

/// Unified motion loss between two T-by-3K nodes, as tape ops.
/// Difference terms whose window exceeds T contribute 0.
pub fn motion_loss_on_tape(
    tape: &mut Tape,
    prediction: Var,
    target: Var,
    k_points: usize,
    w: &LossWeights,
) -> Var {
    let (t, _) = tape.shape(prediction);
    let k = k_points as f64;
    let diff = tape.sub(prediction, target);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    let mut total = tape.scale(sum, 1.0 / (t as f64 * k));
    if t >= 2 && w.velocity > 0.0 {
        let v_pred = temporal_diff(tape, prediction);
        let v_tgt = temporal_diff(tape, target);
        let dv = tape.sub(v_pred, v_tgt);
        let sq = tape.mul(dv, dv);
        let sum = tape.sum_all(sq);
        let term = tape.scale(sum, w.velocity / ((t - 1) as f64 * k));
        total = tape.add(total, term);
    }
    if t >= 3 && w.acceleration > 0.0 {
        let a_pred = second_diff(tape, prediction);
        let a_tgt = second_diff(tape, target);
        let da = tape.sub(a_pred, a_tgt);
        let sq = tape.mul(da, da);
        let sum = tape.sum_all(sq);
        let term = tape.scale(sum, w.acceleration / ((t - 2) as f64 * k));
        total = tape.add(total, term);
    }
    total
}

fn temporal_diff(tape: &mut Tape, x: Var) -> Var {
    let (t, _) = tape.shape(x);
    let hi = tape.slice_rows(x, 1, t);
    let lo = tape.slice_rows(x, 0, t - 1);
    tape.sub(hi, lo)
}

fn second_diff(tape: &mut Tape, x: Var) -> Var {
    let (t, _) = tape.shape(x);
    let a = tape.slice_rows(x, 2, t);
    let b = tape.slice_rows(x, 1, t - 1);
    let c = tape.slice_rows(x, 0, t - 2);
    let b2 = tape.scale(b, 2.0);
    let s = tape.sub(a, b2);
    tape.add(s, c)
}

/// Draw `(step, eps)` for an item from its own seed.
pub fn draw_noise(item: &AtsItem, schedule: &DiffusionSchedule) -> (usize, Mat) {
    let mut rng = crate::rng::stream(item.noise_seed, "ats-noise");
    let step = rng.gen_range(1..=schedule.n_steps());
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let eps = Mat::from_shape_fn(item.x0.dim(), |_| normal.sample(&mut rng));
    (step, eps)
}

/// Single-item loss as a tape node, with the noise fixed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn item_loss_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    item: &AtsItem,
    step: usize,
    eps: &Mat,
    weights: &LossWeights,
    train: bool,
    dropout_rng: &mut impl Rng,
) -> Result<Var> {
    let x_l = forward_diffuse(&item.x0, step, eps, schedule)?;
    let x_l = tape.leaf(x_l);
    let x0_hat = denoiser.denoise_on_tape(
        tape,
        store,
        x_l,
        step,
        &item.audio,
        item.affect,
        denoiser.config.band_radius,
        train,
        dropout_rng,
    )?;
    let target = tape.leaf(item.x0.clone());
    let k = denoiser.config.motion_dim / 3;
    Ok(motion_loss_on_tape(tape, x0_hat, target, k, weights))
}

/// Per-item losses in evaluation mode (no dropout, no gradients). Exact
/// batch-permutation equivariance follows from per-item noise seeds.
pub fn item_losses(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    items: &[AtsItem],
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|item| {
            let (step, eps) = draw_noise(item, schedule);
            let mut tape = Tape::new();
            let mut rng = crate::rng::stream(0, "ats-eval-unused");
            let loss = item_loss_on_tape(
                &mut tape, store, denoiser, schedule, item, step, &eps, weights, false, &mut rng,
            )?;
            Ok(tape.scalar(loss))
        })
        .collect()
}

/// Batch loss: mean of per-item losses.
pub fn ats_loss(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    items: &[AtsItem],
    weights: &LossWeights,
) -> Result<f64> {
    let losses = item_losses(store, denoiser, schedule, items, weights)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One gradient-accumulation pass over a batch: leaves the mean loss's
/// gradients in the store (callers zero the buffers first) and returns the
/// mean loss.
pub fn ats_training_step(
    store: &mut ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    items: &[AtsItem],
    weights: &LossWeights,
    dropout_rng: &mut impl Rng,
) -> Result<f64> {
    assert!(!items.is_empty(), "empty batch");
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    for item in items {
        let (step, eps) = draw_noise(item, schedule);
        let mut tape = Tape::new();
        let loss = item_loss_on_tape(
            &mut tape, store, denoiser, schedule, item, step, &eps, weights, true, dropout_rng,
        )?;
        let scaled = tape.scale(loss, scale);
        total += tape.scalar(scaled);
        let grads = tape.backward(scaled);
        grads.accumulate_into(&tape, store);
    }
    if !total.is_finite() {
        return Err(crate::CoreError::Numerical(format!(
            "non-finite training loss: {total}"
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ats::denoiser::DenoiserConfig;
    use crate::ats::schedule::make_schedule;
    use crate::metrics::{motion_loss, TrajectoryPair};

    fn tiny() -> (ParamStore, Denoiser, DiffusionSchedule) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(1, "loss-test");
        let config = DenoiserConfig {
            motion_dim: 12,
            audio_dim: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            t_max: 10,
            dropout: 0.0,
            band_radius: 2,
            n_emotions: 2,
            max_intensity: 2,
        };
        let den = Denoiser::new(&mut store, config, &mut rng).unwrap();
        let schedule = make_schedule(20, 1e-4, 0.02).unwrap();
        (store, den, schedule)
    }

    fn item(seed: u64) -> AtsItem {
        let mut rng = crate::rng::stream(seed, "loss-item");
        AtsItem {
            x0: Mat::from_shape_fn((6, 12), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0)),
            audio: Mat::from_shape_fn((6, 4), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0)),
            affect: AffectLabel { emotion_id: 0, intensity: 1 },
            noise_seed: seed,
        }
    }

    #[test]
    fn tape_motion_loss_matches_the_pure_metric() {
        // the differentiable loss and the metrics-module loss are independent
        // routes to the same number
        let mut rng = crate::rng::stream(2, "loss-eq");
        for _ in 0..5 {
            let t = 5;
            let k = 4;
            let a = Mat::from_shape_fn((t, 3 * k), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            let b = Mat::from_shape_fn((t, 3 * k), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            let w = LossWeights { velocity: 0.3, acceleration: 0.1 };
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let lv = motion_loss_on_tape(&mut tape, av, bv, k, &w);
            let tape_val = tape.scalar(lv);
            let pair = TrajectoryPair::new(
                crate::ats::unflatten_frames(&b, k),
                crate::ats::unflatten_frames(&a, k),
            )
            .unwrap();
            let pure = motion_loss(&pair, &w);
            assert!((tape_val - pure).abs() < 1e-12, "{tape_val} vs {pure}");
        }
    }

    #[test]
    fn positional_only_loss_matches_direct_arithmetic() {
        let mut rng = crate::rng::stream(3, "loss-pos");
        let t = 4;
        let k = 2;
        let a = Mat::from_shape_fn((t, 3 * k), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let b = Mat::from_shape_fn((t, 3 * k), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let w = LossWeights { velocity: 0.0, acceleration: 0.0 };
        let lv = motion_loss_on_tape(&mut tape, av, bv, k, &w);
        let direct: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / (t * k) as f64;
        assert!((tape.scalar(lv) - direct).abs() < 1e-10);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_for_a_cheating_denoiser() {
        // emulate a perfect reconstruction by feeding x0 as both sides
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((5, 6), 0.37));
        let l = motion_loss_on_tape(&mut tape, x, x, 2, &LossWeights::ats());
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn batch_permutation_permutes_item_losses_exactly() {
        let (store, den, schedule) = tiny();
        let items: Vec<AtsItem> = (0..4).map(|i| item(100 + i)).collect();
        let base = item_losses(&store, &den, &schedule, &items, &LossWeights::ats()).unwrap();
        let permuted: Vec<AtsItem> = [2usize, 0, 3, 1].iter().map(|&i| items[i].clone()).collect();
        let perm = item_losses(&store, &den, &schedule, &permuted, &LossWeights::ats()).unwrap();
        for (slot, &src) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(perm[slot], base[src]);
        }
        for l in base {
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn training_step_produces_finite_loss_and_gradients() {
        let (mut store, den, schedule) = tiny();
        let items: Vec<AtsItem> = (0..2).map(|i| item(7 + i)).collect();
        store.zero_grads();
        let mut rng = crate::rng::stream(4, "step");
        let loss = ats_training_step(
            &mut store,
            &den,
            &schedule,
            &items,
            &LossWeights::ats(),
            &mut rng,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(store.grad_norm() > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, den, schedule) = tiny();
        let items: Vec<AtsItem> = (0..2).map(|i| item(40 + i)).collect();
        let weights = LossWeights::ats();

        store.zero_grads();
        let mut rng = crate::rng::stream(5, "gc-unused");
        ats_training_step(&mut store, &den, &schedule, &items, &weights, &mut rng).unwrap();

        let mut loss_fn = |store: &ParamStore| {
            ats_loss(store, &den, &schedule, &items, &weights).unwrap()
        };
        let mut dir_rng = crate::rng::stream(6, "gc-dirs");
        let err = crate::nn::gradcheck::max_directional_error(
            &mut store,
            &mut loss_fn,
            20,
            1e-6,
            &mut dir_rng,
        );
        assert!(err < 1e-3, "max directional error {err}");
    }
}
