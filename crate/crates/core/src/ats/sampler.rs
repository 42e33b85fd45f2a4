//! Deterministic DDIM sampling in x0-prediction form (eta = 0).

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::ats::denoiser::Denoiser;
use crate::ats::schedule::DiffusionSchedule;
use crate::ats::AffectLabel;
use crate::error::{CoreError, Result};
use crate::nn::params::ParamStore;
use crate::nn::tape::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub band_radius: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ddim_steps: 100,
            band_radius: 2,
            seed: 0,
        }
    }
}

/// Evenly spaced decreasing timesteps `round(k T_d / steps)` for
/// k = steps..1, deduplicated, ending with the final update to step 0.
pub fn ddim_timesteps(t_d: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_d);
    let mut taus: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k as f64 * t_d as f64) / steps as f64).round().max(1.0) as usize)
        .collect();
    taus.dedup();
    taus
}

/// DDIM reverse dynamics around an arbitrary clean-estimate function
/// `denoise_fn(x_l, step) -> x0_hat`. The initial noise draw is the only
/// source of randomness; the final update lands on `alpha_bar(0) = 1`, so the
/// return value is exactly the last clean estimate.
pub fn ddim_sample_with<F>(
    mut denoise_fn: F,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
    shape: (usize, usize),
) -> Result<Mat>
where
    F: FnMut(&Mat, usize) -> Result<Mat>,
{
    if sampler.ddim_steps < 1 || sampler.ddim_steps > schedule.n_steps() {
        return Err(CoreError::Config(format!(
            "ddim_steps {} outside 1..={}",
            sampler.ddim_steps,
            schedule.n_steps()
        )));
    }
    let mut rng = crate::rng::stream(sampler.seed, "ddim-init");
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let mut x = Mat::from_shape_fn(shape, |_| normal.sample(&mut rng));

    let taus = ddim_timesteps(schedule.n_steps(), sampler.ddim_steps);
    for (idx, &step) in taus.iter().enumerate() {
        let next = taus.get(idx + 1).copied().unwrap_or(0);
        let x0_hat = denoise_fn(&x, step)?;
        let abar = schedule.alpha_bar(step);
        let abar_next = schedule.alpha_bar(next);
        // eps_hat = (x - sqrt(abar) x0_hat) / sqrt(1 - abar)
        let eps_hat = (&x - &(&x0_hat * abar.sqrt())) / (1.0 - abar).sqrt();
        x = &x0_hat * abar_next.sqrt() + &eps_hat * (1.0 - abar_next).sqrt();
    }
    Ok(x)
}

/// Reverse the diffusion process conditioned on audio and affect. Returns the
/// final clean estimate (T-by-D, in the model's normalized space).
pub fn ddim_sample(
    store: &ParamStore,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
    audio: &Mat,
    affect: AffectLabel,
) -> Result<Mat> {
    let shape = (audio.nrows(), denoiser.config.motion_dim);
    ddim_sample_with(
        |x, step| denoiser.denoise(store, x, step, audio, affect, sampler.band_radius),
        schedule,
        sampler,
        shape,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ats::denoiser::DenoiserConfig;
    use crate::ats::schedule::make_schedule;
    use crate::nn::params::ParamStore;

    #[test]
    fn timesteps_are_decreasing_and_start_at_t_d() {
        let taus = ddim_timesteps(1000, 100);
        assert_eq!(taus[0], 1000);
        for w in taus.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(*taus.last().unwrap() >= 1);
        assert_eq!(taus.len(), 100);
        // full-length sampling visits every step
        let all = ddim_timesteps(20, 20);
        assert_eq!(all, (1..=20).rev().collect::<Vec<_>>());
    }

    /// With a denoiser stub that returns a constant c at every step, the
    /// sampler must return exactly c (the last update has alpha_bar = 1).
    #[test]
    fn constant_denoiser_returns_the_constant_exactly() {
        let schedule = make_schedule(50, 1e-4, 0.02).unwrap();
        let t = 4;
        let d = 6;
        let c = Mat::from_shape_fn((t, d), |(i, j)| (i * d + j) as f64 * 0.25 - 0.5);
        let sampler = SamplerConfig {
            ddim_steps: 10,
            band_radius: 2,
            seed: 3,
        };
        let out = ddim_sample_with(|_, _| Ok(c.clone()), &schedule, &sampler, (t, d)).unwrap();
        for (a, b) in out.iter().zip(c.iter()) {
            assert_eq!(a, b, "final step must reproduce the constant exactly");
        }
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(5, "sampler-init");
        let config = DenoiserConfig {
            motion_dim: 9,
            audio_dim: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            t_max: 8,
            dropout: 0.0,
            band_radius: 2,
            n_emotions: 2,
            max_intensity: 1,
        };
        let den = Denoiser::new(&mut store, config, &mut rng).unwrap();
        let schedule = make_schedule(30, 1e-4, 0.02).unwrap();
        let sampler = SamplerConfig {
            ddim_steps: 6,
            band_radius: 2,
            seed: 42,
        };
        let audio = Mat::from_shape_fn((5, 4), |(i, j)| ((i + j) as f64).sin());
        let affect = AffectLabel { emotion_id: 1, intensity: 1 };
        let a = ddim_sample(&store, &den, &schedule, &sampler, &audio, affect).unwrap();
        let b = ddim_sample(&store, &den, &schedule, &sampler, &audio, affect).unwrap();
        assert_eq!(a, b);
        let other = ddim_sample(
            &store,
            &den,
            &schedule,
            &SamplerConfig { seed: 43, ..sampler },
            &audio,
            affect,
        )
        .unwrap();
        assert_ne!(a, other);
    }
}
