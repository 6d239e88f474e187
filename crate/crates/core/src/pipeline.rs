//! Dynamic preprocessing: noise injection, 4 s windowing, spectrogram and F0
//! extraction, training-only SpecAugment, and feature assembly. Re-run with
//! fresh random draws every time a record is visited.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::audio_io::{load_for_pipeline, AudioClip};
use crate::augment::{spec_augment, MixupConfig, SpecAugmentConfig};
use crate::config::{KvConfig, KvWriter};
use crate::corpus::{CorpusManifest, Label, NoiseChannel, SpeakerRecord, NOISE_DIR};
use crate::dsp::{estimate_f0, log_mel, stft, ComplexSpectrogram, MelSpectrogram, PitchTrack, SpectroConfig};
use crate::error::{Error, Result};
use crate::features::{assemble, FeatureMatrix, Layout};

pub const WINDOW_SECS: usize = 4;
pub const WINDOW_HOP_SECS: usize = 1;
pub const NOISE_GAIN: (f64, f64) = (0.05, 0.20);
pub const F0_RANGE_HZ: (f64, f64) = (60.0, 500.0);

/// Noise insertions per clip, by class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseCounts {
    pub patient: usize,
    pub control: usize,
}

impl NoiseCounts {
    /// Three insertions for patients, four for controls.
    pub const DEFAULT: NoiseCounts = NoiseCounts {
        patient: 3,
        control: 4,
    };
    pub const EQUAL: NoiseCounts = NoiseCounts {
        patient: 3,
        control: 3,
    };
    pub const NONE: NoiseCounts = NoiseCounts {
        patient: 0,
        control: 0,
    };

    pub fn for_label(&self, label: Label) -> usize {
        match label {
            Label::Patient => self.patient,
            Label::Control => self.control,
        }
    }
}

impl Default for NoiseCounts {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    pub clips: Vec<(NoiseChannel, AudioClip)>,
    pub counts: NoiseCounts,
}

impl NoiseBank {
    pub fn new(clips: Vec<(NoiseChannel, AudioClip)>, counts: NoiseCounts) -> Result<Self> {
        let bank = Self { clips, counts };
        bank.validate()?;
        Ok(bank)
    }

    pub fn empty() -> Self {
        Self {
            clips: Vec::new(),
            counts: NoiseCounts::NONE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needed = self.counts.patient.max(self.counts.control);
        if needed > 0 && self.clips.is_empty() {
            return Err(Error::EmptyNoiseBank { count: needed });
        }
        if self.clips.iter().any(|(_, c)| c.is_empty()) {
            return Err(Error::Config("noise bank contains an empty clip".into()));
        }
        Ok(())
    }

    pub fn with_counts(mut self, counts: NoiseCounts) -> Result<Self> {
        self.counts = counts;
        self.validate()?;
        Ok(self)
    }

    /// Loads `<corpus>/noise/<channel>_<k>.wav`, in file-name order.
    pub fn load_dir(corpus_dir: impl AsRef<Path>, counts: NoiseCounts) -> Result<Self> {
        let dir = corpus_dir.as_ref().join(NOISE_DIR);
        let mut paths: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        paths.sort();
        let mut clips = Vec::with_capacity(paths.len());
        for p in paths {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let channel = stem
                .split('_')
                .next()
                .unwrap_or_default()
                .parse::<NoiseChannel>()?;
            clips.push((channel, load_for_pipeline(&p)?));
        }
        Self::new(clips, counts)
    }
}

/// One draw made by [`inject_noise_traced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub clip_index: usize,
    pub offset: usize,
    pub gain: f64,
}

pub fn inject_noise<R: Rng + ?Sized>(
    clip: &AudioClip,
    bank: &NoiseBank,
    label: Label,
    rng: &mut R,
) -> Result<AudioClip> {
    inject_noise_traced(clip, bank, label, rng).map(|(c, _)| c)
}

/// Adds `bank.counts[label]` noise clips, drawn with replacement, each
/// circularly cropped to the clip length at a random offset and scaled to a
/// random fraction of the clip's peak.
pub fn inject_noise_traced<R: Rng + ?Sized>(
    clip: &AudioClip,
    bank: &NoiseBank,
    label: Label,
    rng: &mut R,
) -> Result<(AudioClip, Vec<NoiseDraw>)> {
    let k = bank.counts.for_label(label);
    if k == 0 {
        return Ok((clip.clone(), Vec::new()));
    }
    if bank.clips.is_empty() {
        return Err(Error::EmptyNoiseBank { count: k });
    }
    let reference = match clip.peak() {
        p if p > 0.0 => p,
        _ => 1.0,
    };
    let mut out = clip.samples.clone();
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let clip_index = rng.random_range(0..bank.clips.len());
        let noise = &bank.clips[clip_index].1;
        let offset = rng.random_range(0..noise.len());
        let gain = rng.random_range(NOISE_GAIN.0..=NOISE_GAIN.1);
        let peak = noise.peak();
        if peak > 0.0 {
            let scale = gain * reference / peak;
            for (i, o) in out.iter_mut().enumerate() {
                *o += scale * noise.samples[(offset + i) % noise.len()];
            }
        }
        draws.push(NoiseDraw {
            clip_index,
            offset,
            gain,
        });
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Ok((AudioClip::new(out, clip.sample_rate, clip.source_id.clone()), draws))
}

/// A fixed 4 s block of a source clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
    pub offset_secs: f64,
    pub label: Label,
}

impl Window {
    pub fn clip(&self) -> AudioClip {
        AudioClip::new(self.samples.clone(), self.sample_rate, self.source_id.clone())
    }
}

/// Start offsets, in samples, of the windows covering `len` samples.
pub fn window_offsets(len: usize, sample_rate: u32) -> Vec<usize> {
    let sr = sample_rate as usize;
    let win = WINDOW_SECS * sr;
    let hop = WINDOW_HOP_SECS * sr;
    if len <= win {
        return vec![0];
    }
    let tail = len - win;
    let mut offsets: Vec<usize> = (0..=tail / hop).map(|k| k * hop).collect();
    if tail % hop != 0 {
        offsets.push(tail);
    }
    offsets
}

/// 4 s windows with a 1 s hop; an extra window ends on the last sample when
/// the hop grid misses it, and short clips are zero-padded to one window.
pub fn make_windows(clip: &AudioClip, label: Label) -> Vec<Window> {
    let win = WINDOW_SECS * clip.sample_rate as usize;
    window_offsets(clip.len(), clip.sample_rate)
        .into_iter()
        .map(|off| {
            let mut samples = vec![0.0; win];
            let end = (off + win).min(clip.len());
            samples[..end - off].copy_from_slice(&clip.samples[off..end]);
            Window {
                samples,
                sample_rate: clip.sample_rate,
                source_id: clip.source_id.clone(),
                offset_secs: off as f64 / clip.sample_rate as f64,
                label,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(Error::UnknownToken {
                field: "mode",
                token: other.to_string(),
            }),
        }
    }
}

/// Preprocessing settings for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub set: u32,
    pub spectro: SpectroConfig,
    pub layout: Layout,
    /// Mode applied to training records; `Eval` trains without augmentation.
    pub mode: Mode,
    pub noise_counts: NoiseCounts,
    pub specaugment: Option<SpecAugmentConfig>,
    pub mixup: Option<MixupConfig>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            set: 1,
            spectro: SpectroConfig::set1(),
            layout: Layout::SpecOnly,
            mode: Mode::Train,
            noise_counts: NoiseCounts::DEFAULT,
            specaugment: None,
            mixup: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// STFT frames in one 4 s window.
    pub fn window_frames(&self) -> usize {
        crate::dsp::frame_count(WINDOW_SECS * self.spectro.sample_rate as usize, self.spectro.hop)
    }

    /// Model input shape for 4 s windows.
    pub fn input_shape(&self) -> (usize, usize) {
        self.layout.shape(self.spectro.n_mels, self.window_frames())
    }

    /// Reads pipeline and augmentation keys from `kv`, starting from `self`.
    pub fn read(mut self, kv: &mut KvConfig) -> Result<Self> {
        if let Some(set) = kv.get::<u32>("set")? {
            self.set = set;
            self.spectro = SpectroConfig::from_set(set)?;
        }
        if let Some(layout) = kv.get::<String>("layout")? {
            self.layout = layout.parse()?;
        }
        if let Some(mode) = kv.get::<String>("mode")? {
            self.mode = mode.parse()?;
        }
        self.noise_counts.patient = kv.get_or("noise_counts.patient", self.noise_counts.patient)?;
        self.noise_counts.control = kv.get_or("noise_counts.control", self.noise_counts.control)?;
        self.seed = kv.get_or("seed", self.seed)?;

        let spec_on = kv.get_or("specaugment.enabled", self.specaugment.is_some())?;
        let mut sa = self.specaugment.unwrap_or_default();
        sa.max_freq = kv.get_or("specaug.F", sa.max_freq)?;
        sa.max_time = kv.get_or("specaug.T", sa.max_time)?;
        sa.n_freq_masks = kv.get_or("specaug.n_freq_masks", sa.n_freq_masks)?;
        sa.n_time_masks = kv.get_or("specaug.n_time_masks", sa.n_time_masks)?;
        self.specaugment = spec_on.then_some(sa);

        let mix_on = kv.get_or("mixup.enabled", self.mixup.is_some())?;
        let mut mx = self.mixup.unwrap_or_default();
        mx.alpha = kv.get_or("mixup.alpha", mx.alpha)?;
        self.mixup = mix_on.then_some(mx);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectro.validate()?;
        if let Some(mx) = &self.mixup {
            mx.validate()?;
        }
        if let Some(sa) = &self.specaugment {
            if self.layout.needs_spectrogram() {
                sa.validate_for(self.spectro.n_mels, self.window_frames())?;
            }
        }
        if self.layout.needs_meta() && self.window_frames() != crate::features::FRAMES {
            return Err(Error::Config(format!(
                "layout {} needs {} frames per window; set {} yields {}",
                self.layout,
                crate::features::FRAMES,
                self.set,
                self.window_frames()
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        let sa = self.specaugment.unwrap_or_default();
        let mx = self.mixup.unwrap_or_default();
        w.put("set", self.set)
            .put("layout", self.layout)
            .put("mode", self.mode)
            .put("noise_counts.patient", self.noise_counts.patient)
            .put("noise_counts.control", self.noise_counts.control)
            .put("specaugment.enabled", self.specaugment.is_some())
            .put("specaug.F", sa.max_freq)
            .put("specaug.T", sa.max_time)
            .put("specaug.n_freq_masks", sa.n_freq_masks)
            .put("specaug.n_time_masks", sa.n_time_masks)
            .put("mixup.enabled", self.mixup.is_some())
            .put("mixup.alpha", mx.alpha)
            .put("seed", self.seed);
        w.finish()
    }
}

/// Spectral views of one window.
#[derive(Debug, Clone)]
pub struct WindowAnalysis {
    pub spec: ComplexSpectrogram,
    pub mel: MelSpectrogram,
    pub pitch: Option<PitchTrack>,
}

pub fn analyze_window(window: &Window, config: &PipelineConfig) -> Result<WindowAnalysis> {
    let clip = window.clip();
    let spec = stft(&clip, &config.spectro)?;
    let mel = log_mel(&spec, &config.spectro)?;
    let pitch = if config.layout.needs_meta() {
        Some(estimate_f0(&clip, &config.spectro, F0_RANGE_HZ.0, F0_RANGE_HZ.1)?)
    } else {
        None
    };
    Ok(WindowAnalysis { spec, mel, pitch })
}

/// One preprocessed window.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureMatrix,
    pub label: Label,
    pub source_id: String,
    pub offset_secs: f64,
}

/// Runs the chain on an already-loaded clip.
pub fn preprocess_clip<R: Rng + ?Sized>(
    clip: &AudioClip,
    record: &SpeakerRecord,
    bank: &NoiseBank,
    config: &PipelineConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Example>> {
    let noisy = inject_noise(clip, bank, record.label, rng)?;
    let augment = match (mode, config.specaugment) {
        (Mode::Train, Some(sa)) if config.layout.needs_spectrogram() => Some(sa),
        _ => None,
    };
    make_windows(&noisy, record.label)
        .into_iter()
        .map(|w| {
            let analysis = analyze_window(&w, config)?;
            let mel = match &augment {
                Some(sa) => spec_augment(&analysis.mel, sa, rng)?,
                None => analysis.mel,
            };
            let features = assemble(Some(&mel), analysis.pitch.as_ref(), Some(record), config.layout)?;
            Ok(Example {
                features,
                label: record.label,
                source_id: record.id.clone(),
                offset_secs: w.offset_secs,
            })
        })
        .collect()
}

/// Loads the record's clip and runs the full chain.
pub fn preprocess_step<R: Rng + ?Sized>(
    manifest: &CorpusManifest,
    record: &SpeakerRecord,
    bank: &NoiseBank,
    config: &PipelineConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Example>> {
    let clip = load_for_pipeline(manifest.clip_path(record))?;
    preprocess_clip(&clip, record, bank, config, mode, rng)
}
