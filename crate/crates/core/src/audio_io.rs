//! WAV input/output and band-limited resampling.
//!
//! Clips are held as `f64` samples in `[-1, 1]`. Reading accepts 16-bit PCM
//! mono or stereo (stereo is averaged down); writing always produces 16-bit
//! PCM mono.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every pipeline stage runs at.
pub const PIPELINE_RATE: u32 = 16_000;

const RESAMPLER_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Outcome of a successful [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteReport {
    /// Number of samples that fell outside `[-1, 1]` and were saturated.
    pub saturated: usize,
}

impl WriteReport {
    pub fn clipped(&self) -> bool {
        self.saturated > 0
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| hound_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        let tag = match spec.sample_format {
            hound::SampleFormat::Int => "format tag 1 (PCM)",
            hound::SampleFormat::Float => "format tag 3 (IEEE float)",
        };
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            encoding: format!("{tag}, {} bits per sample", spec.bits_per_sample),
        });
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            encoding: format!("{} channels", spec.channels),
        });
    }
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_error(path, e))?;
    let samples: Vec<f64> = match spec.channels {
        1 => raw.iter().map(|&s| s as f64 / 32768.0).collect(),
        _ => raw
            .chunks_exact(2)
            .map(|lr| (lr[0] as f64 + lr[1] as f64) / 2.0 / 32768.0)
            .collect(),
    };
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip::new(samples, spec.sample_rate, source_id))
}

/// Writes 16-bit PCM mono. Samples outside `[-1, 1]` are saturated and
/// counted in the returned report.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<WriteReport> {
    let path = path.as_ref();
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    if clip.sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_error(path, e))?;
    let mut report = WriteReport::default();
    for &s in &clip.samples {
        let v = if s.abs() > 1.0 || !s.is_finite() {
            report.saturated += 1;
            if s.is_nan() {
                0.0
            } else {
                s.clamp(-1.0, 1.0)
            }
        } else {
            s
        };
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| hound_error(path, e))?;
    }
    writer.finalize().map_err(|e| hound_error(path, e))?;
    if report.clipped() {
        log::warn!(
            "{}: {} samples outside [-1, 1] were saturated",
            path.display(),
            report.saturated
        );
    }
    Ok(report)
}

fn hound_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(reason) => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            encoding: "format tag not PCM/float".into(),
        },
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Windowed-sinc resampler (Kaiser window, 64 taps).
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = (clip.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist; lowered when decimating.
    let cutoff = ratio.min(1.0);
    let half = (RESAMPLER_TAPS / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let x = &clip.samples;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let center = t.floor() as isize;
            let lo = center - RESAMPLER_TAPS as isize / 2 + 1;
            let hi = center + RESAMPLER_TAPS as isize / 2;
            let mut acc = 0.0;
            for k in lo..=hi {
                if k < 0 || k as usize >= x.len() {
                    continue;
                }
                let u = t - k as f64;
                let r = u / half;
                if r.abs() > 1.0 {
                    continue;
                }
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                acc += x[k as usize] * cutoff * sinc(cutoff * u) * w;
            }
            acc
        })
        .collect();
    Ok(AudioClip::new(samples, target_rate, clip.source_id.clone()))
}

/// Loads a WAV and brings it to the pipeline rate.
pub fn load_for_pipeline(path: impl AsRef<Path>) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    resample(&clip, PIPELINE_RATE)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}
