//! Training-time augmentation: Mix-up on model inputs and SpecAugment
//! frequency/time masking on log-mel spectrograms.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Soft label `(p_patient, p_control)`.
pub type LabelVec = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    /// Symmetric Beta shape.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { alpha: 0.2 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)))
        }
    }
}

/// `λ ~ Beta(α, α)`.
pub fn draw_lambda<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha)
        .map_err(|e| Error::Config(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Convex combination of two inputs and their label vectors.
pub fn mixup(
    x_i: &FeatureMatrix,
    y_i: LabelVec,
    x_j: &FeatureMatrix,
    y_j: LabelVec,
    lambda: f64,
) -> Result<(FeatureMatrix, LabelVec)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if x_i.values.dim() != x_j.values.dim() {
        return Err(Error::shape(
            format!("{:?}", x_i.values.dim()),
            format!("{:?}", x_j.values.dim()),
        ));
    }
    let mut out = x_i.clone();
    out.values = &x_i.values * lambda + &x_j.values * (1.0 - lambda);
    let y = [
        lambda * y_i[0] + (1.0 - lambda) * y_j[0],
        lambda * y_i[1] + (1.0 - lambda) * y_j[1],
    ];
    Ok((out, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    /// Largest masked band height in mel channels.
    pub max_freq: usize,
    /// Largest masked span in frames.
    pub max_time: usize,
    pub n_freq_masks: usize,
    pub n_time_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            max_freq: 8,
            max_time: 20,
            n_freq_masks: 1,
            n_time_masks: 1,
        }
    }
}

impl SpecAugmentConfig {
    pub fn validate_for(&self, n_mels: usize, frames: usize) -> Result<()> {
        if self.max_freq >= n_mels.max(1) {
            return Err(Error::Config(format!(
                "specaug F={} must be below {n_mels} mel channels",
                self.max_freq
            )));
        }
        if self.max_time >= frames.max(1) {
            return Err(Error::Config(format!(
                "specaug T={} must be below {frames} frames",
                self.max_time
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// Half-open span `[start, start + len)` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub len: usize,
}

impl Mask {
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let i = match self.axis {
            MaskAxis::Frequency => row,
            MaskAxis::Time => col,
        };
        i >= self.start && i < self.start + self.len
    }
}

fn draw_mask<R: Rng + ?Sized>(axis: MaskAxis, max_len: usize, extent: usize, rng: &mut R) -> Mask {
    let len = rng.random_range(0..=max_len);
    let start = rng.random_range(0..extent - len);
    Mask { axis, start, len }
}

/// Masks a copy of `mel`, filling each band with the input's mean value, and
/// reports the rectangles written.
pub fn spec_augment_with_masks<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> Result<(MelSpectrogram, Vec<Mask>)> {
    let (n_mels, frames) = mel.values.dim();
    cfg.validate_for(n_mels, frames)?;
    let fill = mel.mean();
    let mut out = mel.clone();
    let mut masks = Vec::with_capacity(cfg.n_freq_masks + cfg.n_time_masks);
    for _ in 0..cfg.n_freq_masks {
        let m = draw_mask(MaskAxis::Frequency, cfg.max_freq, n_mels, rng);
        out.values
            .slice_mut(ndarray::s![m.start..m.start + m.len, ..])
            .fill(fill);
        masks.push(m);
    }
    for _ in 0..cfg.n_time_masks {
        let m = draw_mask(MaskAxis::Time, cfg.max_time, frames, rng);
        out.values
            .slice_mut(ndarray::s![.., m.start..m.start + m.len])
            .fill(fill);
        masks.push(m);
    }
    Ok((out, masks))
}

pub fn spec_augment<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> Result<MelSpectrogram> {
    spec_augment_with_masks(mel, cfg, rng).map(|(m, _)| m)
}
