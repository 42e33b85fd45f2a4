//! Directional finite-difference gradient verification.

use rand_distr::Distribution;

use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::Mat;

/// A unit-norm direction in the full parameter space.
pub struct Direction {
    entries: Vec<(ParamId, Mat)>,
}

pub fn random_direction(store: &ParamStore, rng: &mut impl rand::Rng) -> Direction {
    let dist = rand_distr::StandardNormal;
    let mut entries: Vec<(ParamId, Mat)> = store
        .ids()
        .map(|id| {
            let d = Mat::from_shape_fn(store.value(id).dim(), |_| {
                <rand_distr::StandardNormal as Distribution<f64>>::sample(&dist, rng)
            });
            (id, d)
        })
        .collect();
    let norm: f64 = entries
        .iter()
        .map(|(_, d)| d.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    for (_, d) in &mut entries {
        d.mapv_inplace(|x| x / norm);
    }
    Direction { entries }
}

fn nudge(store: &mut ParamStore, dir: &Direction, scale: f64) {
    for (id, d) in &dir.entries {
        let v = store.value_mut(*id);
        v.zip_mut_with(d, |vi, &di| *vi += scale * di);
    }
}

/// Analytic directional derivative from the gradients currently in the store.
pub fn directional_analytic(store: &ParamStore, dir: &Direction) -> f64 {
    dir.entries
        .iter()
        .map(|(id, d)| {
            store
                .grad(*id)
                .iter()
                .zip(d.iter())
                .map(|(g, di)| g * di)
                .sum::<f64>()
        })
        .sum()
}

/// Compare analytic directional derivatives against central differences of a
/// deterministic loss over `n_directions` random unit directions; returns the
/// worst relative error.
///
/// `loss_fn` must be a pure function of the store (fix any noise before
/// calling). The store's gradient buffers must already hold d(loss)/d(params).
pub fn max_directional_error(
    store: &mut ParamStore,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
    n_directions: usize,
    h: f64,
    rng: &mut impl rand::Rng,
) -> f64 {
    let mut worst = 0f64;
    for _ in 0..n_directions {
        let dir = random_direction(store, rng);
        let analytic = directional_analytic(store, &dir);
        nudge(store, &dir, h);
        let up = loss_fn(store);
        nudge(store, &dir, -2.0 * h);
        let down = loss_fn(store);
        nudge(store, &dir, h);
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
