//! Log-mel filterbank features: 25 ms window, 10 ms hop, 80 bands, ln(x + 1e-6).

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::wav::Waveform;
use crate::audio::{AudioFeatures, FeatureConfig};
use crate::error::{CoreError, Result};

pub const LOG_FLOOR: f64 = 1e-6;

pub fn extract_logmel(wave: &Waveform, config: &FeatureConfig) -> Result<AudioFeatures> {
    let sr = wave.sample_rate as f64;
    let win = (config.window_ms * 1e-3 * sr).round() as usize;
    let hop = (config.hop_ms * 1e-3 * sr).round() as usize;
    if win == 0 || hop == 0 {
        return Err(CoreError::Config(
            "window_ms and hop_ms must be positive".into(),
        ));
    }
    if wave.samples.len() < win {
        return Err(CoreError::Validation(format!(
            "audio too short: {} samples, need at least one {win}-sample window",
            wave.samples.len()
        )));
    }
    let n_frames = (wave.samples.len() - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;

    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()))
        .collect();
    let filterbank = mel_filterbank(config.n_mels, n_fft, sr);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut features = Array2::zeros((n_frames, config.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    for s in 0..n_frames {
        let start = s * hop;
        for i in 0..n_fft {
            let v = if i < win {
                wave.samples[start + i] * hann[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filter) in filterbank.iter().enumerate() {
            let energy: f64 = filter.iter().map(|&(bin, w)| w * power[bin]).sum();
            features[(s, m)] = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(AudioFeatures {
        matrix: features,
        native_rate: sr / hop as f64,
    })
}

/// Triangular mel filters on the one-sided spectrum, `(bin, weight)` pairs.
/// Mel scale: `2595 log10(1 + f/700)`.
fn mel_filterbank(n_mels: usize, n_fft: usize, sr: f64) -> Vec<Vec<(usize, f64)>> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let from_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let f_max = sr / 2.0;
    let mel_points: Vec<f64> = (0..n_mels + 2)
        .map(|i| from_mel(to_mel(f_max) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_freq = |k: usize| k as f64 * sr / n_fft as f64;
    let mut filters = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, mid, hi) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        let mut filter = Vec::new();
        for k in 0..n_bins {
            let f = bin_freq(k);
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                filter.push((k, w));
            }
        }
        filters.push(filter);
    }
    filters
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, dur: f64, sr: u32) -> Waveform {
        let samples = (0..(dur * sr as f64) as usize)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform {
            samples,
            sample_rate: sr,
        }
    }

    #[test]
    fn silence_maps_to_the_log_floor() {
        let wave = Waveform {
            samples: vec![0.0; 16000],
            sample_rate: 16000,
        };
        let feats = extract_logmel(&wave, &FeatureConfig::default()).unwrap();
        let expected = LOG_FLOOR.ln();
        for v in feats.matrix.iter() {
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn frame_count_formula_at_one_second() {
        // floor((16000 - 400)/160) + 1 = 98
        let wave = sine(440.0, 0.3, 1.0, 16000);
        let feats = extract_logmel(&wave, &FeatureConfig::default()).unwrap();
        assert_eq!(feats.matrix.nrows(), 98);
        assert_eq!(feats.matrix.ncols(), 80);
        assert!((feats.native_rate - 100.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_amplitude_shifts_energetic_bands_by_log_four() {
        let quiet = sine(440.0, 0.25, 0.5, 16000);
        let loud = sine(440.0, 0.5, 0.5, 16000);
        let cfg = FeatureConfig::default();
        let fq = extract_logmel(&quiet, &cfg).unwrap();
        let fl = extract_logmel(&loud, &cfg).unwrap();
        let log4 = 4f64.ln();
        let mut checked = 0;
        for s in 0..fq.matrix.nrows() {
            for m in 0..fq.matrix.ncols() {
                // only where energy dominates the floor by a wide margin
                if fq.matrix[(s, m)] > (1e-2f64).ln() {
                    let shift = fl.matrix[(s, m)] - fq.matrix[(s, m)];
                    assert!(
                        (shift - log4).abs() < 0.05 * log4,
                        "band {m}: shift {shift}, want {log4}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 10, "test never hit an energetic band");
    }

    #[test]
    fn audio_shorter_than_a_window_is_rejected() {
        let wave = Waveform {
            samples: vec![0.0; 100],
            sample_rate: 16000,
        };
        assert!(extract_logmel(&wave, &FeatureConfig::default()).is_err());
    }
}
