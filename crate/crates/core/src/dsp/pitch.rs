//! Frame-aligned F0 tracking with YIN: squared-difference function,
//! cumulative-mean normalization, absolute threshold, parabolic refinement.

use super::{frame_count, SpectroConfig};
use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Aperiodicity threshold on the normalized difference function.
pub const YIN_THRESHOLD: f64 = 0.15;

/// Per-frame F0 in Hz (0 = unvoiced) and its spread over voiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub f0_std: f64,
    pub all_unvoiced: bool,
}

impl PitchTrack {
    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().copied().filter(|&f| f > 0.0)
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.voiced().count() as f64 / self.f0.len() as f64
    }

    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }

    /// Builds a track from raw per-frame values, computing the voiced spread.
    pub fn from_frames(f0: Vec<f64>) -> Self {
        let voiced: Vec<f64> = f0.iter().copied().filter(|&f| f > 0.0).collect();
        if voiced.is_empty() {
            return Self {
                f0,
                f0_std: 0.0,
                all_unvoiced: true,
            };
        }
        let n = voiced.len() as f64;
        let mean = voiced.iter().sum::<f64>() / n;
        let var = voiced.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
        Self {
            f0,
            f0_std: var.sqrt(),
            all_unvoiced: false,
        }
    }
}

/// One F0 value per STFT frame of `config` (centered framing).
pub fn estimate_f0(
    clip: &AudioClip,
    config: &SpectroConfig,
    f0_min: f64,
    f0_max: f64,
) -> Result<PitchTrack> {
    config.validate()?;
    let sr = clip.sample_rate as f64;
    if !(f0_min > 0.0 && f0_min < f0_max && f0_max < sr / 2.0) {
        return Err(Error::Config(format!(
            "need 0 < f0_min < f0_max < {}; got {f0_min}, {f0_max}",
            sr / 2.0
        )));
    }
    let tau_max = (sr / f0_min).ceil() as usize;
    let tau_min = ((sr / f0_max).floor() as usize).max(2);
    let frame_len = config.n_fft.max(2 * tau_max + 2);
    let integration = frame_len - tau_max;
    let half = frame_len / 2;

    let mut padded = vec![0.0; clip.len() + 2 * half];
    padded[half..half + clip.len()].copy_from_slice(&clip.samples);

    let frames = frame_count(clip.len(), config.hop);
    let mut diff = vec![0.0; tau_max + 2];
    let f0 = (0..frames)
        .map(|t| {
            let seg = &padded[t * config.hop..t * config.hop + frame_len];
            yin_frame(seg, integration, tau_min, tau_max, &mut diff)
                .map(|tau| sr / tau)
                .filter(|f| (f0_min..=f0_max).contains(f))
                .unwrap_or(0.0)
        })
        .collect();
    Ok(PitchTrack::from_frames(f0))
}

/// Returns the refined period in samples, or `None` when the frame is
/// aperiodic or silent.
fn yin_frame(
    seg: &[f64],
    integration: usize,
    tau_min: usize,
    tau_max: usize,
    diff: &mut [f64],
) -> Option<f64> {
    let energy: f64 = seg[..integration].iter().map(|x| x * x).sum();
    if energy < 1e-8 * integration as f64 {
        return None;
    }
    diff[0] = 0.0;
    for tau in 1..=tau_max {
        diff[tau] = seg[..integration]
            .iter()
            .zip(&seg[tau..tau + integration])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
    }
    // Cumulative-mean normalization, in place.
    let mut running = 0.0;
    diff[0] = 1.0;
    for tau in 1..=tau_max {
        running += diff[tau];
        diff[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }

    let mut tau = tau_min;
    while tau < tau_max {
        if diff[tau] < YIN_THRESHOLD {
            while tau + 1 < tau_max && diff[tau + 1] < diff[tau] {
                tau += 1;
            }
            return Some(parabolic(diff, tau));
        }
        tau += 1;
    }
    None
}

fn parabolic(d: &[f64], tau: usize) -> f64 {
    if tau == 0 || tau + 1 >= d.len() {
        return tau as f64;
    }
    let (a, b, c) = (d[tau - 1], d[tau], d[tau + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        tau as f64
    } else {
        tau as f64 + 0.5 * (a - c) / denom
    }
}
