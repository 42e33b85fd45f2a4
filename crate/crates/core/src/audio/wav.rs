//! WAV loading and writing (PCM 16-bit and float-32; stereo is averaged).

use std::path::Path;

use crate::error::{CoreError, Result};

/// Normalized mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader =
        hound::WavReader::open(path).map_err(|e| CoreError::parse(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(CoreError::parse(path, "zero channels"));
    }
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::parse(path, e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::parse(path, e.to_string()))?,
        (fmt, bits) => {
            return Err(CoreError::parse(
                path,
                format!("unsupported codec: {fmt:?} {bits}-bit (need PCM16 or float32)"),
            ))
        }
    };
    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = (0..channels).map(|c| interleaved[f * channels + c]).sum();
        samples.push(sum / channels as f64);
    }
    if !samples.iter().all(|s| s.is_finite()) {
        return Err(CoreError::parse(path, "non-finite sample"));
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Write a mono waveform as PCM 16-bit.
pub fn save_audio(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(path, e))?;
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| CoreError::parse(path, e.to_string()))?;
    for &s in &wave.samples {
        let clamped = s.clamp(-1.0, 1.0);
        let v = (clamped * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| CoreError::parse(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| CoreError::parse(path, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_of_silence_has_16000_zero_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        save_audio(
            &path,
            &Waveform {
                samples: vec![0.0; 16000],
                sample_rate: 16000,
            },
        )
        .unwrap();
        let wave = load_audio(&path).unwrap();
        assert_eq!(wave.samples.len(), 16000);
        assert_eq!(wave.sample_rate, 16000);
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_with_identical_channels_equals_mono() {
        let dir = tempfile::tempdir().unwrap();
        let mono_path = dir.path().join("mono.wav");
        let stereo_path = dir.path().join("stereo.wav");
        let samples: Vec<f64> = (0..2000)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 16000.0).sin())
            .collect();
        save_audio(
            &mono_path,
            &Waveform {
                samples: samples.clone(),
                sample_rate: 16000,
            },
        )
        .unwrap();
        // hand-write the stereo file with both channels equal
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo_path, spec).unwrap();
        for &s in &samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let mono = load_audio(&mono_path).unwrap();
        let stereo = load_audio(&stereo_path).unwrap();
        assert_eq!(mono.samples, stereo.samples);
    }

    #[test]
    fn sine_peak_survives_pcm16_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let sr = 16000u32;
        let samples: Vec<f64> = (0..sr)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        save_audio(
            &path,
            &Waveform {
                samples,
                sample_rate: sr,
            },
        )
        .unwrap();
        let wave = load_audio(&path).unwrap();
        let peak = wave.samples.iter().fold(0f64, |a, &b| a.max(b.abs()));
        assert!((peak - 0.5).abs() <= 1.5 / 32768.0, "peak = {peak}");
    }

    #[test]
    fn float32_wav_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            w.write_sample(i as f32 / 100.0).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_audio(&path).unwrap();
        assert_eq!(wave.samples.len(), 100);
        assert!((wave.samples[50] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFFgarbage").unwrap();
        assert!(load_audio(&path).is_err());
    }
}
