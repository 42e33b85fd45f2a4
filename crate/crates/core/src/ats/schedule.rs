//! Linear noise schedule and the closed-form forward diffusion step.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::tape::Mat;

pub const DEFAULT_TRAIN_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Beta/alpha arrays for `T_d` diffusion steps. `alpha_bar(0) = 1` by
/// convention; step indices run 1..=T_d.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// alpha_bars[l] = prod_{j<=l} alpha_j, with alpha_bars[0] = 1.
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, step: usize) -> f64 {
        assert!(step >= 1 && step <= self.n_steps());
        self.betas[step - 1]
    }

    pub fn alpha(&self, step: usize) -> f64 {
        assert!(step >= 1 && step <= self.n_steps());
        self.alphas[step - 1]
    }

    pub fn alpha_bar(&self, step: usize) -> f64 {
        assert!(step <= self.n_steps());
        self.alpha_bars[step]
    }
}

/// Linear schedule from `beta_start` to `beta_end` across `t_d` steps.
pub fn make_schedule(t_d: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_d == 0 {
        return Err(CoreError::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(CoreError::Config(format!(
            "invalid schedule endpoints: need 0 < {beta_start} < {beta_end} < 1"
        )));
    }
    let betas: Vec<f64> = if t_d == 1 {
        vec![beta_start]
    } else {
        (0..t_d)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_d - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_d + 1);
    alpha_bars.push(1.0);
    for (i, a) in alphas.iter().enumerate() {
        alpha_bars.push(alpha_bars[i] * a);
    }
    if *alpha_bars.last().unwrap() <= 0.0 {
        return Err(CoreError::Numerical("alpha_bar underflowed to zero".into()));
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form corruption: `x_l = sqrt(abar_l) x0 + sqrt(1 - abar_l) eps`.
/// `step = 0` is the identity boundary.
pub fn forward_diffuse(
    x0: &Mat,
    step: usize,
    eps: &Mat,
    schedule: &DiffusionSchedule,
) -> Result<Mat> {
    if step > schedule.n_steps() {
        return Err(CoreError::Validation(format!(
            "step {step} exceeds schedule length {}",
            schedule.n_steps()
        )));
    }
    if x0.dim() != eps.dim() {
        return Err(CoreError::Validation(format!(
            "shape mismatch: x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let abar = schedule.alpha_bar(step);
    Ok(x0 * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.9).unwrap();
        assert_eq!(s.n_steps(), 1);
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_monotone_and_final_alpha_bar() {
        let s = make_schedule(DEFAULT_TRAIN_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .unwrap();
        for l in 1..s.n_steps() {
            assert!(s.beta(l) < s.beta(l + 1));
            assert!(s.alpha_bar(l) > s.alpha_bar(l + 1));
        }
        // direct product oracle
        let direct: f64 = (1..=s.n_steps()).map(|l| 1.0 - s.beta(l)).product();
        let abar = s.alpha_bar(s.n_steps());
        assert!((abar - direct).abs() < 1e-18);
        assert!(abar > 0.0 && abar < 1e-4, "abar_Td = {abar}");
    }

    #[test]
    fn invalid_endpoints_are_rejected() {
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(10, 0.5, 0.5).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn zero_noise_scales_by_sqrt_alpha_bar() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Mat::from_elem((3, 4), 2.0);
        let eps = Mat::zeros((3, 4));
        let x = forward_diffuse(&x0, 50, &eps, &s).unwrap();
        let want = 2.0 * s.alpha_bar(50).sqrt();
        for v in x.iter() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_at_the_alpha_bar_one_boundary() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Mat::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        let eps = Mat::from_elem((2, 3), 7.0);
        let x = forward_diffuse(&x0, 0, &eps, &s).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn linearity_in_x0_and_eps() {
        let s = make_schedule(64, 1e-4, 0.02).unwrap();
        let mut rng = crate::rng::stream(3, "fd-lin");
        let x0 = Mat::from_shape_fn((4, 6), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let eps = Mat::from_shape_fn((4, 6), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let a = 3.5;
        let lhs = forward_diffuse(&(&x0 * a), 20, &(&eps * a), &s).unwrap();
        let rhs = forward_diffuse(&x0, 20, &eps, &s).unwrap() * a;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            // same three factors multiplied in different order: 1-ulp agreement
            assert!((l - r).abs() <= 1e-15 * r.abs().max(1.0), "{l} vs {r}");
        }
    }

    #[test]
    fn sqrt_identity_holds() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        for l in 0..=1000 {
            let a = s.alpha_bar(l);
            let c = a.sqrt().powi(2) + (1.0 - a).sqrt().powi(2);
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_mean_and_variance_of_the_closed_form() {
        // pick a step with alpha_bar ~ 0.25 and check sample statistics
        let s = make_schedule(200, 1e-4, 0.05).unwrap();
        let mut step = 1;
        while s.alpha_bar(step) > 0.25 {
            step += 1;
        }
        let abar = s.alpha_bar(step);
        let x0 = Mat::from_shape_fn((2, 3), |(i, j)| (i as f64 - 0.5) * (j as f64 + 1.0));
        let draws = 100_000;
        let mut rng = crate::rng::stream(4, "fd-mc");
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut sum = Mat::zeros((2, 3));
        let mut sum_sq = Mat::zeros((2, 3));
        for _ in 0..draws {
            let eps = Mat::from_shape_fn((2, 3), |_| normal.sample(&mut rng));
            let x = forward_diffuse(&x0, step, &eps, &s).unwrap();
            sum += &x;
            sum_sq.zip_mut_with(&x, |acc, &v| *acc += v * v);
        }
        let nf = draws as f64;
        let want_var = 1.0 - abar;
        let sigma = want_var.sqrt();
        for i in 0..2 {
            for j in 0..3 {
                let mean = sum[(i, j)] / nf;
                let var = sum_sq[(i, j)] / nf - mean * mean;
                let want_mean = abar.sqrt() * x0[(i, j)];
                // 3-sigma band on the mean estimator
                let band = 3.0 * sigma / nf.sqrt();
                assert!(
                    (mean - want_mean).abs() < band,
                    "mean ({i},{j}) = {mean}, want {want_mean} +- {band}"
                );
                assert!(
                    (var - want_var).abs() < 0.05 * want_var,
                    "var ({i},{j}) = {var}, want {want_var} within 5%"
                );
            }
        }
    }
}
