//! Synthetic speech corpus.
//!
//! Each speaker is a run of vowel-like segments (three harmonics of a
//! per-speaker F0 under a syllabic envelope) separated by silent pauses,
//! mixed with a recording-environment noise texture. Class differences are
//! carried by pause frequency and length, energy decay over the utterance,
//! and F0 instability. The noise channel is class-correlated: hospital-like
//! for patients, domestic-like for controls.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    rng_for, split_manifest, CorpusManifest, Label, Sex, SpeakerRecord, MANIFEST_FILE,
};
use crate::audio_io::{write_wav, AudioClip};
use crate::config::{KvConfig, KvWriter};
use crate::error::{Error, Result};

pub const WAV_DIR: &str = "wav";
pub const NOISE_DIR: &str = "noise";
pub const PAUSES_FILE: &str = "pauses.csv";
pub const PROFILE_FILE: &str = "generator.cfg";

const RAMP_SECS: f64 = 0.010;
const SPEECH_PEAK: f64 = 0.5;
const MIX_LIMIT: f64 = 0.99;
const HARMONIC_GAINS: [f64; 3] = [1.0, 0.55, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseChannel {
    /// Monitor beeps over mains hum and ventilation rumble.
    Hospital,
    /// Bursts of pink noise.
    Domestic,
    Silent,
}

impl NoiseChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseChannel::Hospital => "hospital",
            NoiseChannel::Domestic => "domestic",
            NoiseChannel::Silent => "silent",
        }
    }
}

impl fmt::Display for NoiseChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hospital" => Ok(NoiseChannel::Hospital),
            "domestic" => Ok(NoiseChannel::Domestic),
            "silent" => Ok(NoiseChannel::Silent),
            other => Err(Error::UnknownToken {
                field: "noise channel",
                token: other.to_string(),
            }),
        }
    }
}

/// Per-class generation parameters. Ranges are uniform `(lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub duration_secs: (f64, f64),
    pub segment_secs: (f64, f64),
    pub pause_ms: (f64, f64),
    /// Probability that a speech segment is followed by a pause.
    pub pause_prob: f64,
    /// Exponential amplitude decay rate, 1/s.
    pub energy_decay: f64,
    /// Relative depth of slow F0 drift.
    pub f0_drift: f64,
    pub channel: NoiseChannel,
}

impl ClassProfile {
    pub fn patient_default() -> Self {
        Self {
            duration_secs: (5.0, 8.0),
            segment_secs: (0.5, 1.1),
            pause_ms: (250.0, 550.0),
            pause_prob: 0.9,
            energy_decay: 0.22,
            f0_drift: 0.06,
            channel: NoiseChannel::Hospital,
        }
    }

    pub fn control_default() -> Self {
        Self {
            duration_secs: (4.0, 6.5),
            segment_secs: (1.0, 2.2),
            pause_ms: (100.0, 260.0),
            pause_prob: 0.35,
            energy_decay: 0.03,
            f0_drift: 0.025,
            channel: NoiseChannel::Domestic,
        }
    }

    pub fn mean_pause_ms(&self) -> f64 {
        (self.pause_ms.0 + self.pause_ms.1) / 2.0
    }

    fn validate(&self, label: Label) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{label} profile: {what}")));
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !(self.duration_secs.1 > 0.0) || !ordered(self.duration_secs) {
            return bad("zero or invalid utterance duration");
        }
        if !(self.segment_secs.0 > 2.0 * RAMP_SECS) || !ordered(self.segment_secs) {
            return bad("speech segments must be longer than the fade ramps");
        }
        if self.pause_ms.0 < 0.0 || !ordered(self.pause_ms) {
            return bad("invalid pause range");
        }
        if !(0.0..=1.0).contains(&self.pause_prob) {
            return bad("pause_prob outside [0, 1]");
        }
        if self.energy_decay < 0.0 || !(0.0..0.5).contains(&self.f0_drift) {
            return bad("invalid energy_decay or f0_drift");
        }
        Ok(())
    }

    fn write(&self, prefix: &str, w: &mut KvWriter) {
        w.put_pair(&format!("{prefix}.duration_secs"), self.duration_secs)
            .put_pair(&format!("{prefix}.segment_secs"), self.segment_secs)
            .put_pair(&format!("{prefix}.pause_ms"), self.pause_ms)
            .put(&format!("{prefix}.pause_prob"), self.pause_prob)
            .put(&format!("{prefix}.energy_decay"), self.energy_decay)
            .put(&format!("{prefix}.f0_drift"), self.f0_drift)
            .put(&format!("{prefix}.channel"), self.channel);
    }

    fn read(prefix: &str, kv: &mut KvConfig, d: Self) -> Result<Self> {
        Ok(Self {
            duration_secs: kv.get_pair(&format!("{prefix}.duration_secs"), d.duration_secs)?,
            segment_secs: kv.get_pair(&format!("{prefix}.segment_secs"), d.segment_secs)?,
            pause_ms: kv.get_pair(&format!("{prefix}.pause_ms"), d.pause_ms)?,
            pause_prob: kv.get_or(&format!("{prefix}.pause_prob"), d.pause_prob)?,
            energy_decay: kv.get_or(&format!("{prefix}.energy_decay"), d.energy_decay)?,
            f0_drift: kv.get_or(&format!("{prefix}.f0_drift"), d.f0_drift)?,
            channel: match kv.get::<String>(&format!("{prefix}.channel"))? {
                Some(s) => s.parse()?,
                None => d.channel,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenProfile {
    pub sample_rate: u32,
    pub patient: ClassProfile,
    pub control: ClassProfile,
    pub male_f0_hz: (f64, f64),
    pub female_f0_hz: (f64, f64),
    pub age_range: (u32, u32),
    pub female_fraction: f64,
    /// Speech-to-channel-noise ratio, dB (RMS).
    pub snr_db: f64,
    /// Noise-bank recordings written per channel.
    pub bank_clips: usize,
    pub bank_secs: f64,
}

impl Default for GenProfile {
    fn default() -> Self {
        Self {
            sample_rate: crate::audio_io::PIPELINE_RATE,
            patient: ClassProfile::patient_default(),
            control: ClassProfile::control_default(),
            male_f0_hz: (90.0, 160.0),
            female_f0_hz: (160.0, 260.0),
            age_range: (18, 90),
            female_fraction: 0.5,
            snr_db: 15.0,
            bank_clips: 4,
            bank_secs: 6.0,
        }
    }
}

impl GenProfile {
    pub fn class(&self, label: Label) -> &ClassProfile {
        match label {
            Label::Patient => &self.patient,
            Label::Control => &self.control,
        }
    }

    /// Same speech, no environment noise anywhere.
    pub fn without_noise(mut self) -> Self {
        self.patient.channel = NoiseChannel::Silent;
        self.control.channel = NoiseChannel::Silent;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        self.patient.validate(Label::Patient)?;
        self.control.validate(Label::Control)?;
        if self.age_range.0 < 18 || self.age_range.1 > 100 || self.age_range.0 > self.age_range.1 {
            return Err(Error::Config("age_range must lie within [18, 100]".into()));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(Error::Config("female_fraction outside [0, 1]".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (lo, hi) in [self.male_f0_hz, self.female_f0_hz] {
            if !(lo > 0.0 && lo <= hi && 3.0 * hi < nyquist) {
                return Err(Error::Config("F0 ranges must be positive and below Nyquist/3".into()));
            }
        }
        if !(self.bank_secs > 0.0) {
            return Err(Error::Config("bank_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.put("sample_rate", self.sample_rate);
        self.patient.write("patient", &mut w);
        self.control.write("control", &mut w);
        w.put_pair("male_f0_hz", self.male_f0_hz)
            .put_pair("female_f0_hz", self.female_f0_hz)
            .put_pair("age_range", self.age_range)
            .put("female_fraction", self.female_fraction)
            .put("snr_db", self.snr_db)
            .put("bank_clips", self.bank_clips)
            .put("bank_secs", self.bank_secs);
        w.finish()
    }

    /// Reads profile keys from `kv`, defaulting whatever is absent.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let p = Self {
            sample_rate: kv.get_or("sample_rate", d.sample_rate)?,
            patient: ClassProfile::read("patient", kv, d.patient)?,
            control: ClassProfile::read("control", kv, d.control)?,
            male_f0_hz: kv.get_pair("male_f0_hz", d.male_f0_hz)?,
            female_f0_hz: kv.get_pair("female_f0_hz", d.female_f0_hz)?,
            age_range: kv.get_pair("age_range", d.age_range)?,
            female_fraction: kv.get_or("female_fraction", d.female_fraction)?,
            snr_db: kv.get_or("snr_db", d.snr_db)?,
            bank_clips: kv.get_or("bank_clips", d.bank_clips)?,
            bank_secs: kv.get_or("bank_secs", d.bank_secs)?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Separately rendered components of one speaker's clip.
#[derive(Debug, Clone)]
pub struct SpeakerRender {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
    /// Pause intervals in seconds.
    pub pauses: Vec<(f64, f64)>,
    pub f0_hz: f64,
    pub sample_rate: u32,
}

impl SpeakerRender {
    /// Speech plus noise, scaled down if the sum would clip.
    pub fn mix(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.speech.iter().zip(&self.noise).map(|(s, n)| s + n).collect();
        let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if peak > MIX_LIMIT {
            let g = MIX_LIMIT / peak;
            out.iter_mut().for_each(|v| *v *= g);
        }
        out
    }

    pub fn clip(&self, source_id: &str) -> AudioClip {
        AudioClip::new(self.mix(), self.sample_rate, source_id)
    }
}

/// Speaker attributes drawn for a generated id.
fn draw_metadata(id: &str, label: Label, profile: &GenProfile, seed: u64) -> SpeakerRecord {
    let mut rng = rng_for(seed, &format!("meta:{id}"));
    let age = rng.random_range(profile.age_range.0..=profile.age_range.1);
    let sex = if rng.random_bool(profile.female_fraction) {
        Sex::Female
    } else {
        Sex::Male
    };
    SpeakerRecord {
        id: id.to_string(),
        label,
        age,
        sex,
        clip_path: PathBuf::from(WAV_DIR).join(format!("{id}.wav")),
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Renders speech and channel noise for `record`. `channel` overrides the
/// class's usual noise channel (used to build noise-swapped test sets).
pub fn render_speaker(
    record: &SpeakerRecord,
    profile: &GenProfile,
    seed: u64,
    channel: Option<NoiseChannel>,
) -> Result<SpeakerRender> {
    profile.validate()?;
    let class = profile.class(record.label);
    let sr = profile.sample_rate as f64;
    let mut rng = rng_for(seed, &format!("speech:{}", record.id));

    let f0_range = match record.sex {
        Sex::Male => profile.male_f0_hz,
        Sex::Female => profile.female_f0_hz,
    };
    let f0 = uniform(&mut rng, f0_range);
    let target = uniform(&mut rng, class.duration_secs);

    // Timeline: speech segments with optional pauses between them.
    let mut segments = Vec::new();
    let mut pauses = Vec::new();
    let mut t = 0.0;
    loop {
        let seg = uniform(&mut rng, class.segment_secs);
        segments.push((t, t + seg));
        t += seg;
        if t >= target {
            break;
        }
        if rng.random_bool(class.pause_prob) {
            let p = uniform(&mut rng, class.pause_ms) / 1000.0;
            // Quantize to whole samples so measured silence matches.
            let p = (p * sr).round() / sr;
            pauses.push((t, t + p));
            t += p;
        }
    }
    let n = (t * sr).round() as usize;

    let drift_rate = rng.random_range(0.4..1.2);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let syllable_rate = rng.random_range(3.5..5.0);
    let gains: Vec<f64> = HARMONIC_GAINS
        .iter()
        .map(|g| g * rng.random_range(0.85..1.15))
        .collect();

    let mut speech = vec![0.0; n];
    let mut phase = 0.0;
    for (start, end) in &segments {
        let i0 = (start * sr).round() as usize;
        let i1 = ((end * sr).round() as usize).min(n);
        for (i, s) in speech.iter_mut().enumerate().take(i1).skip(i0) {
            let time = i as f64 / sr;
            let inst = f0 * (1.0 + class.f0_drift * (2.0 * PI * drift_rate * time + drift_phase).sin());
            phase += 2.0 * PI * inst / sr;
            let carrier: f64 = gains
                .iter()
                .enumerate()
                .map(|(h, g)| g * ((h + 1) as f64 * phase).sin())
                .sum();
            let local = time - start;
            let syllabic = 0.55 + 0.45 * (PI * syllable_rate * local).sin().abs();
            let ramp = fade(local, end - start);
            *s = carrier * syllabic * ramp * (-class.energy_decay * time).exp();
        }
    }
    let peak = speech.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        speech.iter_mut().for_each(|v| *v *= SPEECH_PEAK / peak);
    }

    let channel = channel.unwrap_or(class.channel);
    let mut noise_rng = rng_for(seed, &format!("noise:{}", record.id));
    let mut noise = render_noise(channel, n, profile.sample_rate, &mut noise_rng);
    let speech_rms = rms(&speech);
    let noise_rms = rms(&noise);
    if noise_rms > 0.0 {
        let g = speech_rms / noise_rms / 10f64.powf(profile.snr_db / 20.0);
        noise.iter_mut().for_each(|v| *v *= g);
    }

    Ok(SpeakerRender {
        speech,
        noise,
        pauses,
        f0_hz: f0,
        sample_rate: profile.sample_rate,
    })
}

fn fade(local: f64, len: f64) -> f64 {
    let edge = local.min(len - local);
    if edge >= RAMP_SECS {
        1.0
    } else if edge <= 0.0 {
        0.0
    } else {
        0.5 - 0.5 * (PI * edge / RAMP_SECS).cos()
    }
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }
}

/// Unit-RMS environment texture of `n` samples (all zeros for `Silent`).
pub fn render_noise(channel: NoiseChannel, n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = match channel {
        NoiseChannel::Silent => return vec![0.0; n],
        NoiseChannel::Hospital => {
            let beep_hz = rng.random_range(900.0..1150.0);
            let period = rng.random_range(0.8..1.2);
            let beep_len = 0.12;
            let offset = rng.random_range(0.0..period);
            let hum_hz = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
            let mut lp = 0.0;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let in_beep = ((t + offset) % period) < beep_len;
                    let beep = if in_beep {
                        (2.0 * PI * beep_hz * t).sin()
                    } else {
                        0.0
                    };
                    let hum: f64 = (1..=3)
                        .map(|h| (2.0 * PI * hum_hz * h as f64 * t).sin() / h as f64)
                        .sum();
                    // One-pole low-passed white noise for ventilation rumble.
                    lp += 0.05 * (rng.random_range(-1.0..1.0) - lp);
                    1.4 * beep + 0.5 * hum + 4.0 * lp
                })
                .collect::<Vec<f64>>()
        }
        NoiseChannel::Domestic => {
            let mut pink = PinkNoise::default();
            let mut out = Vec::with_capacity(n);
            let mut on = rng.random_bool(0.5);
            let mut left = 0usize;
            for _ in 0..n {
                if left == 0 {
                    on = !on;
                    let secs = if on {
                        rng.random_range(0.2..0.8)
                    } else {
                        rng.random_range(0.2..1.0)
                    };
                    left = (secs * sr) as usize + 1;
                }
                left -= 1;
                let level = if on { 1.0 } else { 0.15 };
                out.push(level * pink.next(rng));
            }
            out
        }
    };
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    out
}

/// Paul Kellet's economy pink-noise filter.
#[derive(Default)]
struct PinkNoise {
    b: [f64; 3],
}

impl PinkNoise {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let white: f64 = rng.random_range(-1.0..1.0);
        self.b[0] = 0.99765 * self.b[0] + white * 0.0990460;
        self.b[1] = 0.96300 * self.b[1] + white * 0.2965164;
        self.b[2] = 0.57000 * self.b[2] + white * 1.0526913;
        self.b[0] + self.b[1] + self.b[2] + white * 0.1848
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest: CorpusManifest,
    /// Pause intervals in seconds, per speaker id.
    pub pauses: Vec<(String, Vec<(f64, f64)>)>,
    pub noise_clips: Vec<(NoiseChannel, PathBuf)>,
}

/// Split sizes used when none are requested: `(80, 10, 30)` scaled to the
/// corpus size.
pub(crate) fn default_split_sizes(total: usize) -> (usize, usize, usize) {
    let val = (total as f64 * 10.0 / 120.0).round() as usize;
    let test = (total as f64 * 30.0 / 120.0).round() as usize;
    (total - val - test, val, test)
}

/// Writes one WAV per speaker, the noise bank, pause annotations, the
/// profile and `manifest.csv` under `out_dir`.
pub fn generate_corpus(
    out_dir: impl AsRef<Path>,
    n_patients: usize,
    n_controls: usize,
    seed: u64,
    profile: &GenProfile,
    split: Option<(usize, usize, usize)>,
) -> Result<GeneratedCorpus> {
    let out_dir = out_dir.as_ref();
    if n_patients == 0 || n_controls == 0 {
        return Err(Error::Config("need at least one patient and one control".into()));
    }
    profile.validate()?;
    for sub in [WAV_DIR, NOISE_DIR] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let total = n_patients + n_controls;
    let mut records = Vec::with_capacity(total);
    let mut pauses = Vec::with_capacity(total);
    for i in 0..total {
        let label = if i < n_patients { Label::Patient } else { Label::Control };
        let id = format!("spk{i:04}");
        let record = draw_metadata(&id, label, profile, seed);
        let render = render_speaker(&record, profile, seed, None)?;
        write_wav(&render.clip(&id), out_dir.join(&record.clip_path))?;
        pauses.push((id, render.pauses));
        records.push(record);
    }

    let mut noise_clips = Vec::new();
    for channel in [NoiseChannel::Hospital, NoiseChannel::Domestic] {
        for k in 0..profile.bank_clips {
            let n = (profile.bank_secs * profile.sample_rate as f64).round() as usize;
            let mut rng = rng_for(seed, &format!("bank:{channel}:{k}"));
            let mut tex = render_noise(channel, n, profile.sample_rate, &mut rng);
            let peak = tex.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                tex.iter_mut().for_each(|v| *v *= 0.9 / peak);
            }
            let rel = PathBuf::from(NOISE_DIR).join(format!("{channel}_{k}.wav"));
            write_wav(&AudioClip::new(tex, profile.sample_rate, channel.as_str()), out_dir.join(&rel))?;
            noise_clips.push((channel, rel));
        }
    }

    let manifest = CorpusManifest::new(records, out_dir)?;
    let (tr, va, te) = split.unwrap_or_else(|| default_split_sizes(total));
    let manifest = split_manifest(&manifest, tr, va, te, seed)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;

    let mut pause_csv = String::from("id,start_s,end_s\n");
    for (id, ps) in &pauses {
        for (a, b) in ps {
            pause_csv.push_str(&format!("{id},{a:.6},{b:.6}\n"));
        }
    }
    let p = out_dir.join(PAUSES_FILE);
    std::fs::write(&p, pause_csv).map_err(|e| Error::io(&p, e))?;

    let mut cfg = format!("seed={seed}\n");
    cfg.push_str(&profile.to_kv());
    let p = out_dir.join(PROFILE_FILE);
    std::fs::write(&p, cfg).map_err(|e| Error::io(&p, e))?;

    Ok(GeneratedCorpus {
        manifest,
        pauses,
        noise_clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: Label, id: &str) -> SpeakerRecord {
        draw_metadata(id, label, &GenProfile::default(), 1)
    }

    // Runs of exact zeros at least 20 ms long, in seconds.
    fn silence_runs(x: &[f64], sr: f64) -> Vec<f64> {
        let min = (0.02 * sr) as usize;
        let mut runs = Vec::new();
        let mut len = 0;
        for &v in x.iter().chain(std::iter::once(&1.0)) {
            if v == 0.0 {
                len += 1;
            } else {
                if len >= min {
                    runs.push(len as f64 / sr);
                }
                len = 0;
            }
        }
        runs
    }

    #[test]
    fn patient_pauses_average_400_ms() {
        let profile = GenProfile::default();
        let mut runs = Vec::new();
        for i in 0..100 {
            let r = render_speaker(&record(Label::Patient, &format!("p{i}")), &profile, 3, None).unwrap();
            runs.extend(silence_runs(&r.speech, 16000.0));
        }
        let mean_ms = 1000.0 * runs.iter().sum::<f64>() / runs.len() as f64;
        assert!((mean_ms - 400.0).abs() <= 50.0, "mean pause {mean_ms} ms");
    }

    #[test]
    fn class_pause_statistics_match_profile() {
        let profile = GenProfile::default();
        for label in Label::ALL {
            let class = profile.class(label);
            let (mut pauses, mut gaps, mut total_ms) = (0usize, 0usize, 0.0);
            for i in 0..100 {
                let r = render_speaker(&record(label, &format!("x{i}")), &profile, 5, None).unwrap();
                let runs = silence_runs(&r.speech, 16000.0);
                pauses += runs.len();
                total_ms += runs.iter().sum::<f64>() * 1000.0;
                // Segment boundaries that could have carried a pause.
                gaps += r.pauses.len();
            }
            assert_eq!(pauses, gaps);
            let mean = total_ms / pauses as f64;
            let expected = class.mean_pause_ms();
            assert!((mean - expected).abs() <= 0.1 * expected, "{label}: {mean} vs {expected}");
        }
    }

    #[test]
    fn patients_pause_more_than_controls() {
        let profile = GenProfile::default();
        let rate = |label| {
            let (mut n, mut secs) = (0usize, 0.0);
            for i in 0..40 {
                let r = render_speaker(&record(label, &format!("r{i}")), &profile, 2, None).unwrap();
                n += r.pauses.len();
                secs += r.speech.len() as f64 / 16000.0;
            }
            n as f64 / secs
        };
        assert!(rate(Label::Patient) > 2.0 * rate(Label::Control));
    }

    #[test]
    fn render_is_deterministic_and_swap_keeps_speech() {
        let profile = GenProfile::default();
        let rec = record(Label::Patient, "d0");
        let a = render_speaker(&rec, &profile, 9, None).unwrap();
        let b = render_speaker(&rec, &profile, 9, None).unwrap();
        assert_eq!(a.mix(), b.mix());
        let s = render_speaker(&rec, &profile, 9, Some(NoiseChannel::Domestic)).unwrap();
        assert_eq!(a.speech, s.speech);
        assert_ne!(a.noise, s.noise);
    }

    #[test]
    fn noise_sits_at_requested_snr() {
        let profile = GenProfile::default();
        let r = render_speaker(&record(Label::Control, "n0"), &profile, 4, None).unwrap();
        let snr = 20.0 * (rms(&r.speech) / rms(&r.noise)).log10();
        assert!((snr - profile.snr_db).abs() < 1e-9);
        assert!(r.mix().iter().all(|v| v.abs() <= MIX_LIMIT));
    }

    #[test]
    fn zero_duration_profile_rejected() {
        let mut profile = GenProfile::default();
        profile.patient.duration_secs = (0.0, 0.0);
        assert!(profile.validate().is_err());
    }

    #[test]
    fn profile_round_trips_through_kv() {
        let mut p = GenProfile::default();
        p.snr_db = 7.5;
        p.control.channel = NoiseChannel::Silent;
        let mut kv = KvConfig::parse(&p.to_kv()).unwrap();
        let q = GenProfile::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn default_split_for_120_is_desk_scale() {
        assert_eq!(default_split_sizes(120), (80, 10, 30));
    }
}
