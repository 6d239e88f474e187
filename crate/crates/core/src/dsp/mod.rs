//! Spectral analysis and synthesis: STFT, log-mel, their inverses, and
//! frame-aligned F0 tracking.

mod export;
mod mel;
mod pitch;
mod stft;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use export::{matrix_to_csv, matrix_to_pgm, read_matrix_csv, write_matrix_csv, write_matrix_pgm, PgmScaling};
pub use mel::{hz_to_mel, inverse_log_mel, log_mel, mel_filterbank, mel_to_hz, MelBasis};
pub use pitch::{estimate_f0, PitchTrack, YIN_THRESHOLD};
pub use stft::{frame_count, hann_window, istft, stft};

/// Spectrogram extraction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectroConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_len: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub log_floor: f64,
}

pub const DEFAULT_LOG_FLOOR: f64 = 1e-10;

impl SpectroConfig {
    /// Hop 160, 601 bins, 80 mels, window 400 at 16 kHz.
    pub fn set1() -> Self {
        Self {
            n_fft: 1200,
            hop: 160,
            win_len: 400,
            n_mels: 80,
            sample_rate: 16_000,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    /// Hop 320, 513 bins, 64 mels, window 1024 at 16 kHz.
    pub fn set2() -> Self {
        Self {
            n_fft: 1024,
            hop: 320,
            win_len: 1024,
            n_mels: 64,
            sample_rate: 16_000,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }

    pub fn from_set(set: u32) -> Result<Self> {
        match set {
            1 => Ok(Self::set1()),
            2 => Ok(Self::set2()),
            other => Err(Error::Config(format!("unknown spectrogram set {other}"))),
        }
    }

    pub fn n_freq(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_fft == 0 || self.hop == 0 || self.win_len == 0 || self.sample_rate == 0 {
            return fail("n_fft, hop, win_len and sample_rate must be positive".into());
        }
        if self.win_len > self.n_fft {
            return fail(format!("win_len {} exceeds n_fft {}", self.win_len, self.n_fft));
        }
        if self.hop > self.win_len {
            return fail(format!("hop {} exceeds win_len {}", self.hop, self.win_len));
        }
        if self.n_mels == 0 || self.n_mels >= self.n_freq() {
            return fail(format!(
                "n_mels {} must be in [1, n_freq={})",
                self.n_mels,
                self.n_freq()
            ));
        }
        if !(self.log_floor > 0.0) {
            return fail("log_floor must be positive".into());
        }
        Ok(())
    }
}

/// Complex STFT as magnitude and phase, both `[n_freq × frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.magnitude.ncols()
    }

    pub fn n_freq(&self) -> usize {
        self.magnitude.nrows()
    }
}

/// Natural-log mel magnitudes, `[n_mels × frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub config: SpectroConfig,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}
