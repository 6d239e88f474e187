use nalgebra::DMatrix;
use ndarray::Array2;

use super::{istft, ComplexSpectrogram, MelSpectrogram, SpectroConfig};
use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filter center frequencies in Hz, strictly increasing.
fn mel_points(config: &SpectroConfig) -> Vec<f64> {
    let top = hz_to_mel(config.sample_rate as f64 / 2.0);
    let n = config.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(top * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular mel filters, `[n_mels × n_freq]`, each row summing to one.
///
/// The first and last filters are held flat below the lowest and above the
/// highest center so DC and Nyquist bins are covered.
pub fn mel_filterbank(config: &SpectroConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let n_freq = config.n_freq();
    let points = mel_points(config);
    let last = config.n_mels - 1;
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    let mut fb = Array2::zeros((config.n_mels, n_freq));
    for m in 0..config.n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_freq {
            let f = k as f64 * bin_hz;
            let w = if f <= center {
                if m == 0 {
                    1.0
                } else {
                    (f - lo) / (center - lo)
                }
            } else if m == last {
                1.0
            } else {
                (hi - f) / (hi - center)
            };
            fb[[m, k]] = w.max(0.0);
        }
        let sum: f64 = fb.row(m).sum();
        if sum <= 0.0 {
            return Err(Error::Config(format!(
                "mel filter {m} covers no frequency bin; lower n_mels or raise n_fft"
            )));
        }
        fb.row_mut(m).mapv_inplace(|w| w / sum);
    }
    Ok(fb)
}

/// Filterbank together with its Moore-Penrose pseudo-inverse.
#[derive(Debug, Clone)]
pub struct MelBasis {
    pub weights: Array2<f64>,
    pub pinv: Array2<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelBasis {
    pub fn new(config: &SpectroConfig) -> Result<Self> {
        let weights = mel_filterbank(config)?;
        let (rows, cols) = weights.dim();
        let m = DMatrix::from_fn(rows, cols, |r, c| weights[[r, c]]);
        let p = m
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("mel pseudo-inverse failed: {e}")))?;
        let pinv = Array2::from_shape_fn((cols, rows), |(r, c)| p[(r, c)]);
        let points = mel_points(config);
        Ok(Self {
            weights,
            pinv,
            centers_hz: points[1..=config.n_mels].to_vec(),
        })
    }
}

/// `ln(max(filterbank · magnitude, log_floor))`.
pub fn log_mel(spec: &ComplexSpectrogram, config: &SpectroConfig) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(config)?;
    if spec.n_freq() != fb.ncols() {
        return Err(Error::shape(
            format!("{} frequency bins", fb.ncols()),
            spec.n_freq(),
        ));
    }
    let floor = config.log_floor;
    let values = fb.dot(&spec.magnitude).mapv_into(|v| v.max(floor).ln());
    Ok(MelSpectrogram {
        values,
        config: *config,
    })
}

/// Linear magnitude recovered through the pseudo-inverse, clamped at zero,
/// recombined with `phase` and inverted.
pub fn inverse_log_mel(
    mel: &MelSpectrogram,
    phase: &Array2<f64>,
    config: &SpectroConfig,
) -> Result<AudioClip> {
    let basis = MelBasis::new(config)?;
    if mel.n_mels() != config.n_mels {
        return Err(Error::shape(format!("{} mel bands", config.n_mels), mel.n_mels()));
    }
    if phase.dim() != (config.n_freq(), mel.frames()) {
        return Err(Error::shape(
            format!("phase ({}, {})", config.n_freq(), mel.frames()),
            format!("{:?}", phase.dim()),
        ));
    }
    let linear = mel.values.mapv(f64::exp);
    let magnitude = basis.pinv.dot(&linear).mapv_into(|v| v.max(0.0));
    istft(
        &ComplexSpectrogram {
            magnitude,
            phase: phase.clone(),
        },
        config,
    )
}
