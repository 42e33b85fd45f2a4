//! The unified motion loss and the seven trajectory evaluation metrics.
//!
//! All functions operate on displacement trajectories (`T`-by-`K`-by-`3`,
//! stored as `Vec` of `K`-by-`3` frames) and are pure. The DP metrics (DTW,
//! discrete Fréchet) are checked against exhaustive-search oracles in the
//! test suite.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Velocity/acceleration weights of the unified motion loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub velocity: f64,
    pub acceleration: f64,
}

impl LossWeights {
    pub fn new(velocity: f64, acceleration: f64) -> Result<LossWeights> {
        if velocity < 0.0 || acceleration < 0.0 {
            return Err(CoreError::Validation(
                "loss weights must be nonnegative".into(),
            ));
        }
        Ok(LossWeights {
            velocity,
            acceleration,
        })
    }

    /// ATS defaults (landmark stage).
    pub fn ats() -> LossWeights {
        LossWeights {
            velocity: 0.3,
            acceleration: 0.1,
        }
    }

    /// STM defaults (dense stage).
    pub fn stm() -> LossWeights {
        LossWeights {
            velocity: 0.5,
            acceleration: 0.2,
        }
    }
}

/// Ground-truth / prediction pair of displacement trajectories with matching
/// shapes (same frame count, same K points).
#[derive(Debug, Clone)]
pub struct TrajectoryPair {
    pub truth: Vec<Array2<f64>>,
    pub prediction: Vec<Array2<f64>>,
}

impl TrajectoryPair {
    pub fn new(truth: Vec<Array2<f64>>, prediction: Vec<Array2<f64>>) -> Result<TrajectoryPair> {
        if truth.is_empty() || truth.len() != prediction.len() {
            return Err(CoreError::Validation(format!(
                "trajectory lengths differ or are empty: {} vs {}",
                truth.len(),
                prediction.len()
            )));
        }
        let k = truth[0].nrows();
        for f in truth.iter().chain(prediction.iter()) {
            if f.nrows() != k || f.ncols() != 3 {
                return Err(CoreError::Validation(format!(
                    "frame shape {}x{} != {k}x3",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        Ok(TrajectoryPair { truth, prediction })
    }

    pub fn n_frames(&self) -> usize {
        self.truth.len()
    }

    pub fn n_points(&self) -> usize {
        self.truth[0].nrows()
    }
}

/// All seven metrics for one sequence, in mesh units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub lve: f64,
    pub mve: f64,
    pub fdd: f64,
    pub dtw: f64,
    pub dfd: f64,
    pub delta_m: f64,
    pub delta_cd: f64,
}

impl MetricReport {
    pub fn values(&self) -> [(&'static str, f64); 7] {
        [
            ("lve", self.lve),
            ("mve", self.mve),
            ("fdd", self.fdd),
            ("dtw", self.dtw),
            ("dfd", self.dfd),
            ("delta_m", self.delta_m),
            ("delta_cd", self.delta_cd),
        ]
    }
}

/// Unified motion loss: mean squared positional error plus weighted first-
/// and second-difference terms, each normalized by its own frame count and K.
/// Difference terms whose window exceeds T contribute 0.
pub fn motion_loss(pair: &TrajectoryPair, w: &LossWeights) -> f64 {
    let t = pair.n_frames();
    let k = pair.n_points() as f64;
    let sq = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut loss = 0.0;
    let pos: f64 = (0..t)
        .map(|i| sq(&pair.truth[i], &pair.prediction[i]))
        .sum();
    loss += pos / (t as f64 * k);
    if t >= 2 && w.velocity > 0.0 {
        let vel: f64 = (0..t - 1)
            .map(|i| {
                let dv_true = &pair.truth[i + 1] - &pair.truth[i];
                let dv_pred = &pair.prediction[i + 1] - &pair.prediction[i];
                sq(&dv_true, &dv_pred)
            })
            .sum();
        loss += w.velocity * vel / ((t - 1) as f64 * k);
    }
    if t >= 3 && w.acceleration > 0.0 {
        let acc: f64 = (0..t - 2)
            .map(|i| {
                let a_true = &pair.truth[i + 2] - &(&pair.truth[i + 1] * 2.0) + &pair.truth[i];
                let a_pred =
                    &pair.prediction[i + 2] - &(&pair.prediction[i + 1] * 2.0) + &pair.prediction[i];
                sq(&a_true, &a_pred)
            })
            .sum();
        loss += w.acceleration * acc / ((t - 2) as f64 * k);
    }
    loss
}

fn point_error(a: &Array2<f64>, b: &Array2<f64>, v: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a[(v, c)] - b[(v, c)];
        s += d * d;
    }
    s.sqrt()
}

/// Lip Vertex Error: mean over frames of the max L2 error over mask points.
pub fn lve(pair: &TrajectoryPair, mouth_mask: &[usize]) -> Result<f64> {
    masked_max_error(pair, mouth_mask)
}

/// Max Vertex Error: same aggregation over all points.
pub fn mve(pair: &TrajectoryPair) -> f64 {
    let all: Vec<usize> = (0..pair.n_points()).collect();
    masked_max_error(pair, &all).expect("full mask is nonempty")
}

fn masked_max_error(pair: &TrajectoryPair, mask: &[usize]) -> Result<f64> {
    check_mask(pair, mask)?;
    let t = pair.n_frames();
    let sum: f64 = (0..t)
        .map(|i| {
            mask.iter()
                .map(|&v| point_error(&pair.truth[i], &pair.prediction[i], v))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / t as f64)
}

/// Upper-face dynamic deviation: per masked point, the temporal standard
/// deviation of its displacement magnitude; FDD is the mean absolute
/// difference of those deviations between prediction and ground truth.
pub fn fdd(pair: &TrajectoryPair, upper_mask: &[usize]) -> Result<f64> {
    check_mask(pair, upper_mask)?;
    if pair.n_frames() < 2 {
        return Err(CoreError::Validation(
            "fdd needs at least two frames".into(),
        ));
    }
    let std_of = |frames: &[Array2<f64>], v: usize| -> f64 {
        let mags: Vec<f64> = frames
            .iter()
            .map(|f| {
                let mut s = 0.0;
                for c in 0..3 {
                    s += f[(v, c)] * f[(v, c)];
                }
                s.sqrt()
            })
            .collect();
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / mags.len() as f64;
        var.sqrt()
    };
    let sum: f64 = upper_mask
        .iter()
        .map(|&v| (std_of(&pair.prediction, v) - std_of(&pair.truth, v)).abs())
        .sum();
    Ok(sum / upper_mask.len() as f64)
}

/// Stacked per-frame lip vectors used by the alignment metrics.
fn frame_distance(pair: &TrajectoryPair, mask: &[usize], i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for &v in mask {
        for c in 0..3 {
            let d = pair.truth[i][(v, c)] - pair.prediction[j][(v, c)];
            s += d * d;
        }
    }
    s.sqrt()
}

/// Dynamic time warping over the masked frame sequences, total path cost
/// normalized by the optimal warping path length.
pub fn dtw(pair: &TrajectoryPair, lip_mask: &[usize]) -> Result<f64> {
    check_mask(pair, lip_mask)?;
    let n = pair.truth.len();
    let m = pair.prediction.len();
    let mut cost = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(pair, lip_mask, i, j);
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 {
                    b = b.min(cost[(i - 1, j)]);
                }
                if j > 0 {
                    b = b.min(cost[(i, j - 1)]);
                }
                if i > 0 && j > 0 {
                    b = b.min(cost[(i - 1, j - 1)]);
                }
                b
            };
            cost[(i, j)] = d + best_prev;
        }
    }
    // backtrack the optimal path to count its length (diagonal preferred on
    // exact ties, then up, then left)
    let mut len = 1usize;
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let candidates = [
            (i.checked_sub(1), j.checked_sub(1)),
            (i.checked_sub(1), Some(j)),
            (Some(i), j.checked_sub(1)),
        ];
        let mut best: Option<(usize, usize, f64)> = None;
        for (ci, cj) in candidates {
            if let (Some(ci), Some(cj)) = (ci, cj) {
                let c = cost[(ci, cj)];
                if best.map(|(_, _, b)| c < b).unwrap_or(true) {
                    best = Some((ci, cj, c));
                }
            }
        }
        let (bi, bj, _) = best.expect("path exists");
        i = bi;
        j = bj;
        len += 1;
    }
    Ok(cost[(n - 1, m - 1)] / len as f64)
}

/// Discrete Fréchet distance via the standard coupling recursion over the
/// same frame-distance matrix as [`dtw`].
pub fn dfd(pair: &TrajectoryPair, lip_mask: &[usize]) -> Result<f64> {
    check_mask(pair, lip_mask)?;
    let n = pair.truth.len();
    let m = pair.prediction.len();
    let mut ca = Array2::from_elem((n, m), 0.0f64);
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(pair, lip_mask, i, j);
            ca[(i, j)] = if i == 0 && j == 0 {
                d
            } else {
                let mut prev = f64::INFINITY;
                if i > 0 {
                    prev = prev.min(ca[(i - 1, j)]);
                }
                if j > 0 {
                    prev = prev.min(ca[(i, j - 1)]);
                }
                if i > 0 && j > 0 {
                    prev = prev.min(ca[(i - 1, j - 1)]);
                }
                d.max(prev)
            };
        }
    }
    Ok(ca[(n - 1, m - 1)])
}

/// Mean squared error between consecutive-frame displacement deltas.
pub fn delta_m(pair: &TrajectoryPair) -> Result<f64> {
    let t = pair.n_frames();
    if t < 2 {
        return Err(CoreError::Validation(
            "delta_m needs at least two frames".into(),
        ));
    }
    let k = pair.n_points();
    let mut sum = 0.0;
    for i in 0..t - 1 {
        for v in 0..k {
            for c in 0..3 {
                let dp = pair.prediction[i + 1][(v, c)] - pair.prediction[i][(v, c)];
                let dt = pair.truth[i + 1][(v, c)] - pair.truth[i][(v, c)];
                sum += (dp - dt) * (dp - dt);
            }
        }
    }
    Ok(sum / ((t - 1) as f64 * k as f64))
}

const ZERO_NORM: f64 = 1e-9;

/// Mean cosine distance between consecutive-frame displacement deltas.
/// Vectors below the zero threshold: both zero -> 0, exactly one zero -> 1.
pub fn delta_cd(pair: &TrajectoryPair) -> Result<f64> {
    let t = pair.n_frames();
    if t < 2 {
        return Err(CoreError::Validation(
            "delta_cd needs at least two frames".into(),
        ));
    }
    let k = pair.n_points();
    let mut sum = 0.0;
    for i in 0..t - 1 {
        for v in 0..k {
            let mut dp = [0.0; 3];
            let mut dt = [0.0; 3];
            for c in 0..3 {
                dp[c] = pair.prediction[i + 1][(v, c)] - pair.prediction[i][(v, c)];
                dt[c] = pair.truth[i + 1][(v, c)] - pair.truth[i][(v, c)];
            }
            let np = (dp[0] * dp[0] + dp[1] * dp[1] + dp[2] * dp[2]).sqrt();
            let nt = (dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2]).sqrt();
            sum += match (np < ZERO_NORM, nt < ZERO_NORM) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                (false, false) if dp == dt => 0.0, // exact-zero contract
                (false, false) => {
                    let cos = (dp[0] * dt[0] + dp[1] * dt[1] + dp[2] * dt[2]) / (np * nt);
                    1.0 - cos.clamp(-1.0, 1.0)
                }
            };
        }
    }
    Ok(sum / ((t - 1) as f64 * k as f64))
}

/// Run the full suite on one pair with the region masks it needs.
pub fn full_report(
    pair: &TrajectoryPair,
    mouth_mask: &[usize],
    upper_mask: &[usize],
    lip_mask: &[usize],
) -> Result<MetricReport> {
    Ok(MetricReport {
        lve: lve(pair, mouth_mask)?,
        mve: mve(pair),
        fdd: fdd(pair, upper_mask)?,
        dtw: dtw(pair, lip_mask)?,
        dfd: dfd(pair, lip_mask)?,
        delta_m: delta_m(pair)?,
        delta_cd: delta_cd(pair)?,
    })
}

fn check_mask(pair: &TrajectoryPair, mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(CoreError::Validation("empty region mask".into()));
    }
    let k = pair.n_points();
    if let Some(&bad) = mask.iter().find(|&&v| v >= k) {
        return Err(CoreError::Validation(format!(
            "mask index {bad} out of range (K = {k})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frame(vals: &[[f64; 3]]) -> Array2<f64> {
        let mut a = Array2::zeros((vals.len(), 3));
        for (i, v) in vals.iter().enumerate() {
            for c in 0..3 {
                a[(i, c)] = v[c];
            }
        }
        a
    }

    fn random_pair(t: usize, k: usize, rng: &mut impl Rng) -> TrajectoryPair {
        let gen = |rng: &mut dyn FnMut() -> f64| -> Vec<Array2<f64>> {
            (0..t)
                .map(|_| Array2::from_shape_fn((k, 3), |_| rng()))
                .collect()
        };
        let mut g1 = || rng.gen_range(-1.0..1.0);
        let truth = gen(&mut g1);
        let mut g2 = || rng.gen_range(-1.0..1.0);
        let prediction = gen(&mut g2);
        TrajectoryPair::new(truth, prediction).unwrap()
    }

    #[test]
    fn everything_is_zero_on_identical_trajectories() {
        let mut rng = crate::rng::stream(1, "metrics");
        let truth: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let pair = TrajectoryPair::new(truth.clone(), truth).unwrap();
        let mask = vec![0, 1];
        let report = full_report(&pair, &mask, &mask, &mask).unwrap();
        for (name, v) in report.values() {
            assert_eq!(v, 0.0, "{name} nonzero on identical trajectories");
        }
        assert_eq!(motion_loss(&pair, &LossWeights::ats()), 0.0);
    }

    #[test]
    fn constant_offset_hits_only_the_positional_term() {
        // velocity and acceleration of a constant offset vanish
        let mut rng = crate::rng::stream(2, "metrics");
        let truth: Vec<Array2<f64>> = (0..6)
            .map(|_| Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let delta = [0.3, -0.2, 0.6];
        let prediction: Vec<Array2<f64>> = truth
            .iter()
            .map(|f| {
                let mut g = f.clone();
                for i in 0..3 {
                    for c in 0..3 {
                        g[(i, c)] += delta[c];
                    }
                }
                g
            })
            .collect();
        let pair = TrajectoryPair::new(truth, prediction).unwrap();
        let loss = motion_loss(&pair, &LossWeights { velocity: 5.0, acceleration: 7.0 });
        let want: f64 = delta.iter().map(|d| d * d).sum();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        // offsets cancel in the displacement deltas too
        assert!(delta_m(&pair).unwrap() < 1e-24);
    }

    #[test]
    fn hand_case_t3_k1_matches_direct_arithmetic() {
        let truth = vec![
            frame(&[[0.0, 0.0, 0.0]]),
            frame(&[[1.0, 0.0, 0.0]]),
            frame(&[[3.0, 0.0, 0.0]]),
        ];
        let pred = vec![
            frame(&[[0.5, 0.0, 0.0]]),
            frame(&[[1.0, 0.5, 0.0]]),
            frame(&[[2.0, 0.0, 0.5]]),
        ];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        let w = LossWeights { velocity: 0.4, acceleration: 0.25 };
        // ten-line direct computation
        let pos = (0.25 + 0.25 + (1.0 + 0.25)) / 3.0;
        // velocities: truth (1,0,0),(2,0,0); pred (0.5,0.5,0),(1,-0.5,0.5)
        let vel = ((0.25 + 0.25 + 0.0) + (1.0 + 0.25 + 0.25)) / 2.0;
        // accelerations: truth (1,0,0); pred (0.5,-1,0.5)
        let acc = (0.25 + 1.0 + 0.25) / 1.0;
        let want = pos + 0.4 * vel + 0.25 * acc;
        let got = motion_loss(&pair, &w);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        // delta_m oracle on the same pair
        let dm = delta_m(&pair).unwrap();
        let dm_want = ((0.25 + 0.25 + 0.0) + (1.0 + 0.25 + 0.25)) / 2.0;
        assert!((dm - dm_want).abs() < 1e-12);
    }

    #[test]
    fn lve_example_single_offset_frame() {
        // one mouth vertex off by 2.0 in one of two frames -> mean {2, 0} = 1
        let truth = vec![frame(&[[0.0; 3], [0.0; 3]]), frame(&[[0.0; 3], [0.0; 3]])];
        let mut p0 = frame(&[[0.0; 3], [0.0; 3]]);
        p0[(1, 0)] = 2.0;
        let pred = vec![p0, frame(&[[0.0; 3], [0.0; 3]])];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        assert_eq!(lve(&pair, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn mve_constant_single_vertex_offset() {
        let truth = vec![frame(&[[0.0; 3], [0.0; 3]]); 4];
        let pred: Vec<Array2<f64>> = (0..4)
            .map(|_| {
                let mut f = frame(&[[0.0; 3], [0.0; 3]]);
                f[(0, 2)] = 3.0;
                f
            })
            .collect();
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        assert_eq!(mve(&pair), 3.0);
    }

    #[test]
    fn scaling_homogeneity() {
        let mut rng = crate::rng::stream(3, "metrics");
        let pair = random_pair(5, 4, &mut rng);
        let mask = vec![0, 2];
        let s = 2.75;
        let scaled = TrajectoryPair::new(
            pair.truth.iter().map(|f| f * s).collect(),
            pair.prediction.iter().map(|f| f * s).collect(),
        )
        .unwrap();
        let w = LossWeights::ats();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9 * (1.0 + a.abs().max(b.abs()));
        assert!(close(motion_loss(&scaled, &w), s * s * motion_loss(&pair, &w)));
        assert!(close(lve(&scaled, &mask).unwrap(), s * lve(&pair, &mask).unwrap()));
        assert!(close(mve(&scaled), s * mve(&pair)));
        assert!(close(delta_m(&scaled).unwrap(), s * s * delta_m(&pair).unwrap()));
        assert!(close(delta_cd(&scaled).unwrap(), delta_cd(&pair).unwrap()));
    }

    #[test]
    fn fdd_two_frame_single_vertex_hand_case() {
        // truth magnitudes {0, 2} -> std 1; prediction static -> std 0
        let truth = vec![frame(&[[0.0; 3]]), frame(&[[2.0, 0.0, 0.0]])];
        let pred = vec![frame(&[[0.5, 0.0, 0.0]]), frame(&[[0.5, 0.0, 0.0]])];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        assert!((fdd(&pair, &[0]).unwrap() - 1.0).abs() < 1e-12);
        // both static -> 0
        let t2 = vec![frame(&[[1.0, 0.0, 0.0]]); 3];
        let p2 = vec![frame(&[[0.0, 5.0, 0.0]]); 3];
        let pair2 = TrajectoryPair::new(t2, p2).unwrap();
        assert_eq!(fdd(&pair2, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn single_frame_dtw_and_dfd_are_the_pointwise_distance() {
        let truth = vec![frame(&[[1.0, 0.0, 0.0]])];
        let pred = vec![frame(&[[0.0, 2.0, 0.0]])];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        let d = 5f64.sqrt();
        assert!((dtw(&pair, &[0]).unwrap() - d).abs() < 1e-12);
        assert!((dfd(&pair, &[0]).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn opposite_motion_gives_cosine_distance_two() {
        let truth = vec![frame(&[[0.0; 3]]), frame(&[[1.0, 0.0, 0.0]])];
        let pred = vec![frame(&[[0.0; 3]]), frame(&[[-1.0, 0.0, 0.0]])];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        assert_eq!(delta_cd(&pair).unwrap(), 2.0);
    }

    #[test]
    fn static_prediction_against_moving_truth_is_one_per_term() {
        let truth = vec![
            frame(&[[0.0; 3]]),
            frame(&[[1.0, 0.0, 0.0]]),
            frame(&[[2.0, 0.0, 0.0]]),
        ];
        let pred = vec![frame(&[[0.5, 0.5, 0.5]]); 3];
        let pair = TrajectoryPair::new(truth, pred).unwrap();
        assert_eq!(delta_cd(&pair).unwrap(), 1.0);
    }

    // ------------------------------------------------------ exhaustive oracles

    /// All monotone warping paths from (0,0) to (n-1,m-1).
    fn enumerate_paths(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![(0usize, 0usize)]];
        while let Some(path) = stack.pop() {
            let &(i, j) = path.last().unwrap();
            if i == n - 1 && j == m - 1 {
                out.push(path);
                continue;
            }
            for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
                let (ni, nj) = (i + di, j + dj);
                if ni < n && nj < m {
                    let mut next = path.clone();
                    next.push((ni, nj));
                    stack.push(next);
                }
            }
        }
        out
    }

    #[test]
    fn dtw_matches_exhaustive_path_search() {
        for seed in 0..30u64 {
            let mut rng = crate::rng::stream(seed, "dtw-oracle");
            let t = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=3);
            let pair = random_pair(t, k, &mut rng);
            let mask: Vec<usize> = (0..k).collect();
            let got = dtw(&pair, &mask).unwrap();
            // oracle: min over all paths of total cost, then divide by that
            // path's length
            let mut best = f64::INFINITY;
            let mut best_len = 1usize;
            for path in enumerate_paths(t, t) {
                let cost: f64 = path
                    .iter()
                    .map(|&(i, j)| frame_distance(&pair, &mask, i, j))
                    .sum();
                if cost < best {
                    best = cost;
                    best_len = path.len();
                }
            }
            let want = best / best_len as f64;
            assert!(
                (got - want).abs() < 1e-9,
                "seed {seed}: dtw {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn dfd_matches_exhaustive_coupling_search() {
        for seed in 0..30u64 {
            let mut rng = crate::rng::stream(seed, "dfd-oracle");
            let t = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=3);
            let pair = random_pair(t, k, &mut rng);
            let mask: Vec<usize> = (0..k).collect();
            let got = dfd(&pair, &mask).unwrap();
            let mut want = f64::INFINITY;
            for path in enumerate_paths(t, t) {
                let worst = path
                    .iter()
                    .map(|&(i, j)| frame_distance(&pair, &mask, i, j))
                    .fold(0.0, f64::max);
                want = want.min(worst);
            }
            assert!(
                (got - want).abs() < 1e-9,
                "seed {seed}: dfd {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn dfd_equals_max_distance_along_its_optimal_coupling() {
        for seed in 100..110u64 {
            let mut rng = crate::rng::stream(seed, "dfd-coupling");
            let pair = random_pair(5, 2, &mut rng);
            let mask = vec![0, 1];
            let got = dfd(&pair, &mask).unwrap();
            // the optimal coupling's bottleneck is some frame distance
            let mut distances = Vec::new();
            for i in 0..5 {
                for j in 0..5 {
                    distances.push(frame_distance(&pair, &mask, i, j));
                }
            }
            assert!(
                distances.iter().any(|d| (d - got).abs() < 1e-12),
                "dfd value must be one of the pairwise frame distances"
            );
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut rng = crate::rng::stream(4, "metrics");
        let pair = random_pair(3, 2, &mut rng);
        assert!(lve(&pair, &[]).is_err());
        assert!(fdd(&pair, &[]).is_err());
        assert!(dtw(&pair, &[]).is_err());
    }

    #[test]
    fn short_sequences_error_where_defined() {
        let truth = vec![frame(&[[0.0; 3]])];
        let pair = TrajectoryPair::new(truth.clone(), truth).unwrap();
        assert!(delta_m(&pair).is_err());
        assert!(delta_cd(&pair).is_err());
        // motion loss on T=1 has no difference terms but is still defined
        assert_eq!(motion_loss(&pair, &LossWeights::stm()), 0.0);
    }
}
