use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{ComplexSpectrogram, SpectroConfig};
use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Frames produced by centered framing: `floor(len / hop) + 1`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Hann window of `win_len` centered inside `n_fft` zeros.
fn padded_window(config: &SpectroConfig) -> Vec<f64> {
    let mut w = vec![0.0; config.n_fft];
    let offset = (config.n_fft - config.win_len) / 2;
    for (i, v) in hann_window(config.win_len).into_iter().enumerate() {
        w[offset + i] = v;
    }
    w
}

/// Reflect-pads `pad` samples on both sides (edge sample not repeated).
pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(Error::ClipTooShort {
            len: x.len(),
            needed: pad + 1,
        });
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    Ok(out)
}

/// Centered short-time Fourier transform.
pub fn stft(clip: &AudioClip, config: &SpectroConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let len = clip.len();
    if len < config.win_len {
        return Err(Error::ClipTooShort {
            len,
            needed: config.win_len,
        });
    }
    let pad = config.n_fft / 2;
    let padded = reflect_pad(&clip.samples, pad)?;
    let window = padded_window(config);
    let frames = frame_count(len, config.hop);
    let n_freq = config.n_freq();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); config.n_fft];
    let mut magnitude = Array2::zeros((n_freq, frames));
    let mut phase = Array2::zeros((n_freq, frames));
    for t in 0..frames {
        let start = t * config.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freq {
            magnitude[[k, t]] = buf[k].norm();
            phase[[k, t]] = buf[k].arg();
        }
    }
    Ok(ComplexSpectrogram { magnitude, phase })
}

/// Inverse STFT by weighted overlap-add. Output length is
/// `(frames - 1) * hop`, the length of the clip that produced a centered
/// spectrogram with this many frames.
pub fn istft(spec: &ComplexSpectrogram, config: &SpectroConfig) -> Result<AudioClip> {
    config.validate()?;
    let n_freq = config.n_freq();
    if spec.magnitude.dim() != spec.phase.dim() {
        return Err(Error::shape(
            format!("phase {:?}", spec.magnitude.dim()),
            format!("{:?}", spec.phase.dim()),
        ));
    }
    if spec.n_freq() != n_freq {
        return Err(Error::shape(
            format!("{n_freq} frequency bins"),
            format!("{}", spec.n_freq()),
        ));
    }
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::shape("at least one frame", "0 frames"));
    }
    let n_fft = config.n_fft;
    let window = padded_window(config);
    let total = (frames - 1) * config.hop + n_fft;
    let mut out = vec![0.0; total];
    let mut wsum = vec![0.0; total];

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        for k in 0..n_freq {
            buf[k] = Complex::from_polar(spec.magnitude[[k, t]], spec.phase[[k, t]]);
        }
        for k in n_freq..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * config.hop;
        for i in 0..n_fft {
            let w = window[i];
            out[start + i] += buf[i].re / n_fft as f64 * w;
            wsum[start + i] += w * w;
        }
    }
    for (o, w) in out.iter_mut().zip(&wsum) {
        if *w > 1e-10 {
            *o /= w;
        }
    }
    let pad = n_fft / 2;
    let samples = out[pad..pad + (frames - 1) * config.hop].to_vec();
    Ok(AudioClip::new(samples, config.sample_rate, "istft"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
        let signal: f64 = reference.iter().map(|x| x * x).sum();
        let noise: f64 = reference
            .iter()
            .zip(estimate)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        10.0 * (signal / noise.max(1e-300)).log10()
    }

    fn sine(freq: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * 0.5)
                .collect(),
            16000,
            "sine",
        )
    }

    #[test]
    fn four_seconds_at_hop_160_gives_401_frames() {
        let clip = AudioClip::new(vec![0.0; 64000], 16000, "z");
        let spec = stft(&clip, &SpectroConfig::set1()).unwrap();
        assert_eq!(spec.frames(), 401);
        assert_eq!(spec.n_freq(), 601);
    }

    #[test]
    fn silence_has_zero_magnitude() {
        let clip = AudioClip::new(vec![0.0; 8000], 16000, "z");
        let spec = stft(&clip, &SpectroConfig::set1()).unwrap();
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = SpectroConfig::set1();
        let spec = stft(&sine(1000.0, 16000), &cfg).unwrap();
        let expected = (1000.0 * cfg.n_fft as f64 / 16000.0).round() as usize;
        for t in 5..spec.frames() - 5 {
            let col = spec.magnitude.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip::new(vec![0.1; 300], 16000, "s");
        assert!(matches!(
            stft(&clip, &SpectroConfig::set1()),
            Err(Error::ClipTooShort { .. })
        ));
    }

    #[test]
    fn round_trip_snr_above_40_db_both_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..32000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let clip = AudioClip::new(x.clone(), 16000, "noise");
        for cfg in [SpectroConfig::set1(), SpectroConfig::set2()] {
            let y = istft(&stft(&clip, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(y.len(), 32000);
            assert!(snr_db(&x, &y.samples) >= 40.0);
        }
    }

    #[test]
    fn zero_spectrogram_gives_zero_signal() {
        let cfg = SpectroConfig::set1();
        let spec = ComplexSpectrogram {
            magnitude: Array2::zeros((601, 11)),
            phase: Array2::zeros((601, 11)),
        };
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), 1600);
        assert!(y.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn phase_perturbation_changes_waveform() {
        let cfg = SpectroConfig::set1();
        let clip = sine(440.0, 16000);
        let mut spec = stft(&clip, &cfg).unwrap();
        let base = istft(&spec, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        spec.phase.mapv_inplace(|p| p + rng.random_range(-1.0..1.0));
        let perturbed = istft(&spec, &cfg).unwrap();
        assert!(snr_db(&base.samples, &perturbed.samples) < 20.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = SpectroConfig::set1();
        let spec = ComplexSpectrogram {
            magnitude: Array2::zeros((513, 4)),
            phase: Array2::zeros((513, 4)),
        };
        assert!(matches!(istft(&spec, &cfg), Err(Error::ShapeMismatch { .. })));
    }
}
