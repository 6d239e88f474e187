//! Window voting, confusion matrices, the experiment runner and the
//! noise-confound bias probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::audio_io::{load_for_pipeline, write_wav, AudioClip};
use crate::augment::SpecAugmentConfig;
use crate::config::KvConfig;
use crate::corpus::{
    load_manifest, render_speaker, rng_for, CorpusManifest, GenProfile, Label, Split, SpeakerRecord, MANIFEST_FILE,
    PAUSES_FILE, PROFILE_FILE,
};
use crate::dsp::{write_matrix_csv, ComplexSpectrogram, MelSpectrogram, SpectroConfig};
use crate::error::{Error, Result};
use crate::explain::{
    apply_heatmap, attention_row, export_panel, grad_cam, sonify, spectrogram_region, ClassSign, HeatMap,
    ATTENTION_HEADER,
};
use crate::features::{assemble, FeatureMatrix, Layout};
use crate::model::{
    layers::bce_with_logit, predict_many, save_state, train, ModelConfig, ModelState, Sample, TrainConfig,
    TrainReport, ValScore,
};
use crate::pipeline::{
    analyze_window, inject_noise, make_windows, preprocess_clip, Mode, NoiseBank, NoiseCounts, PipelineConfig,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TABLE_HEADER: &str = "exp,tp,tn,fp,fn,acc_percent";
const SCORE_BATCH: usize = 16;

/// Order-preserving map over `items` on up to `workers` threads.
pub fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Summed window probabilities and the winning class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub label: Label,
    pub patient_sum: f64,
    pub control_sum: f64,
}

/// Sums `(p_patient, p_control)` over windows; the larger sum wins and an
/// exact tie goes to the patient class.
pub fn vote(window_probs: &[(f64, f64)]) -> Result<Vote> {
    if window_probs.is_empty() {
        return Err(Error::EmptyDataset("no windows to vote over".into()));
    }
    let mut patient_sum = 0.0;
    let mut control_sum = 0.0;
    for &(p, c) in window_probs {
        if (p + c - 1.0).abs() > 1e-6 || !p.is_finite() || !c.is_finite() {
            return Err(Error::OutOfRange(format!("window probabilities ({p}, {c}) do not sum to 1")));
        }
        patient_sum += p;
        control_sum += c;
    }
    let label = if patient_sum >= control_sum {
        Label::Patient
    } else {
        Label::Control
    };
    Ok(Vote {
        label,
        patient_sum,
        control_sum,
    })
}

/// Patient is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Patient, Label::Patient) => self.tp += 1,
            (Label::Control, Label::Control) => self.tn += 1,
            (Label::Control, Label::Patient) => self.fp += 1,
            (Label::Patient, Label::Control) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    pub fn accuracy_percent(&self) -> f64 {
        100.0 * self.accuracy()
    }

    /// A results line under [`TABLE_HEADER`].
    pub fn table_row(&self, exp: u32) -> String {
        format!(
            "{exp},{},{},{},{},{:.2}",
            self.tp,
            self.tn,
            self.fp,
            self.fn_,
            self.accuracy_percent()
        )
    }
}

/// A manifest with its clips in memory, plus the noise bank and generator
/// metadata when present.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    pub clips: BTreeMap<String, AudioClip>,
    pub bank: NoiseBank,
    /// Generator profile and seed, for re-rendering speakers.
    pub generator: Option<(GenProfile, u64)>,
    pub pauses: BTreeMap<String, Vec<(f64, f64)>>,
}

impl CorpusData {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
        let mut clips = BTreeMap::new();
        for r in &manifest.records {
            clips.insert(r.id.clone(), load_for_pipeline(manifest.clip_path(r))?);
        }
        let bank = if dir.join(crate::corpus::NOISE_DIR).is_dir() {
            NoiseBank::load_dir(&dir, NoiseCounts::DEFAULT)?
        } else {
            NoiseBank::empty()
        };
        let profile_path = dir.join(PROFILE_FILE);
        let generator = if profile_path.is_file() {
            let mut kv = KvConfig::load(&profile_path)?;
            let seed = kv.get_or("seed", 0u64)?;
            let profile = GenProfile::from_kv(&mut kv)?;
            kv.finish()?;
            Some((profile, seed))
        } else {
            None
        };
        let pauses = load_pauses(&dir.join(PAUSES_FILE))?;
        Ok(Self {
            dir,
            manifest,
            clips,
            bank,
            generator,
            pauses,
        })
    }

    pub fn records(&self, split: Split) -> Vec<&SpeakerRecord> {
        self.manifest.records_in(split)
    }

    pub fn clip(&self, id: &str) -> Result<&AudioClip> {
        self.clips
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("no clip loaded for `{id}`")))
    }

    /// The speaker re-rendered with the other class's environment noise.
    pub fn swapped_clip(&self, record: &SpeakerRecord) -> Result<AudioClip> {
        let (profile, seed) = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no generator profile", self.dir.display())))?;
        let channel = profile.class(record.label.other()).channel;
        Ok(render_speaker(record, profile, *seed, Some(channel))?.clip(&record.id))
    }

    /// Noise bank with the given insertion counts.
    pub fn bank_with(&self, counts: NoiseCounts) -> Result<NoiseBank> {
        self.bank.clone().with_counts(counts)
    }
}

fn load_pauses(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Manifest(format!("{}: bad pause row", path.display())))
        };
        out.entry(row.get(0).unwrap_or_default().to_string())
            .or_default()
            .push((parse(1)?, parse(2)?));
    }
    Ok(out)
}

/// One speaker's preprocessed evaluation windows.
#[derive(Debug, Clone)]
pub struct SpeakerWindows {
    pub record: SpeakerRecord,
    pub windows: Vec<FeatureMatrix>,
    pub offsets_secs: Vec<f64>,
}

/// Eval-mode features, with noise drawn from a fixed per-speaker stream.
pub fn eval_windows(
    record: &SpeakerRecord,
    clip: &AudioClip,
    bank: &NoiseBank,
    pipeline: &PipelineConfig,
) -> Result<SpeakerWindows> {
    let mut rng = rng_for(pipeline.seed, &format!("eval:{}", record.id));
    let examples = preprocess_clip(clip, record, bank, pipeline, Mode::Eval, &mut rng)?;
    Ok(SpeakerWindows {
        record: record.clone(),
        offsets_secs: examples.iter().map(|e| e.offset_secs).collect(),
        windows: examples.into_iter().map(|e| e.features).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerResult {
    pub id: String,
    pub label: Label,
    pub vote: Vote,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub speakers: Vec<SpeakerResult>,
    /// Mean window-level cross-entropy.
    pub window_loss: f64,
}

impl EvalReport {
    pub fn speakers_csv(&self) -> String {
        let mut out = String::from("id,label,predicted,sum_patient,sum_control,windows\n");
        for s in &self.speakers {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                s.id, s.label, s.vote.label, s.vote.patient_sum, s.vote.control_sum, s.n_windows
            );
        }
        out
    }

    pub fn val_score(&self) -> ValScore {
        ValScore {
            accuracy: self.confusion.accuracy(),
            loss: self.window_loss,
        }
    }
}

/// Votes per speaker using `score`, which maps windows to patient
/// probabilities.
pub fn evaluate_with<F>(speakers: &[SpeakerWindows], mut score: F) -> Result<EvalReport>
where
    F: FnMut(&[&FeatureMatrix]) -> Result<Vec<f64>>,
{
    if speakers.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    let mut confusion = ConfusionMatrix::default();
    let mut results = Vec::with_capacity(speakers.len());
    let mut loss = 0.0;
    let mut count = 0usize;
    for s in speakers {
        let refs: Vec<&FeatureMatrix> = s.windows.iter().collect();
        let probs = score(&refs)?;
        let target = s.record.label.one_hot()[0];
        for &p in &probs {
            let z = (p.clamp(1e-15, 1.0 - 1e-15) / (1.0 - p.clamp(1e-15, 1.0 - 1e-15))).ln();
            loss += bce_with_logit(z, target);
            count += 1;
        }
        let pairs: Vec<(f64, f64)> = probs.iter().map(|&p| (p, 1.0 - p)).collect();
        let v = vote(&pairs)?;
        confusion.add(s.record.label, v.label);
        results.push(SpeakerResult {
            id: s.record.id.clone(),
            label: s.record.label,
            vote: v,
            n_windows: probs.len(),
        });
    }
    Ok(EvalReport {
        confusion,
        speakers: results,
        window_loss: loss / count.max(1) as f64,
    })
}

pub fn evaluate_prepared(state: &ModelState, speakers: &[SpeakerWindows]) -> Result<EvalReport> {
    evaluate_with(speakers, |xs| predict_many(state, xs, SCORE_BATCH))
}

/// Preprocesses and scores one split of `corpus`.
pub fn evaluate(
    state: &ModelState,
    corpus: &CorpusData,
    split: Split,
    pipeline: &PipelineConfig,
    workers: usize,
) -> Result<EvalReport> {
    let bank = corpus.bank_with(pipeline.noise_counts)?;
    let records = corpus.records(split);
    let speakers = par_map(&records, workers, |r| eval_windows(r, corpus.clip(&r.id)?, &bank, pipeline))?;
    evaluate_prepared(state, &speakers)
}

/// Everything needed to train and score one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub id: u32,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Preprocessing threads; results do not depend on it.
    pub workers: usize,
}

impl ExperimentSpec {
    /// Effective configuration as `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut w = crate::config::KvWriter::new();
        w.put("exp", self.id);
        self.model.write_kv(&mut w);
        w.put("train.epochs", self.train.epochs)
            .put("train.batch_size", self.train.batch_size)
            .put("train.lr", self.train.learning_rate)
            .put("train.momentum", self.train.momentum)
            .put("train.patience", self.train.patience.unwrap_or(0));
        w.finish() + &self.pipeline.to_kv()
    }

    /// Applies `train.*`, `model.*` and pipeline keys from `kv`.
    pub fn read(mut self, kv: &mut KvConfig) -> Result<Self> {
        self.pipeline = self.pipeline.read(kv)?;
        self.model.input_shape = self.pipeline.input_shape();
        self.model = self.model.read(kv)?;
        self.train.epochs = kv.get_or("train.epochs", self.train.epochs)?;
        self.train.batch_size = kv.get_or("train.batch_size", self.train.batch_size)?;
        self.train.learning_rate = kv.get_or("train.lr", self.train.learning_rate)?;
        self.train.momentum = kv.get_or("train.momentum", self.train.momentum)?;
        let patience = kv.get_or("train.patience", self.train.patience.unwrap_or(0))?;
        self.train.patience = (patience > 0).then_some(patience);
        self.train.seed = self.pipeline.seed;
        self.train.mixup = self.pipeline.mixup;
        self.train.validate()?;
        if self.model.input_shape != self.pipeline.input_shape() {
            return Err(Error::Config(format!(
                "model input {:?} does not match pipeline output {:?}",
                self.model.input_shape,
                self.pipeline.input_shape()
            )));
        }
        Ok(self)
    }
}

/// Epoch cap and early-stopping patience for the experiment runner, sized so
/// Experiment 1 on the default corpus trains in well under 15 minutes on one
/// core.
pub const EXPERIMENT_EPOCHS: usize = 20;
pub const EXPERIMENT_PATIENCE: usize = 5;

/// Configuration of experiments 1, 2, 3 and 5. Experiment 4 (pretrained
/// weights) and 6 (heat-map analysis) are not trainable here.
pub fn experiment_spec(id: u32, seed: u64) -> Result<ExperimentSpec> {
    let base = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let pipeline = match id {
        1 => PipelineConfig {
            layout: Layout::SpecOnly,
            ..base
        },
        2 => PipelineConfig {
            layout: Layout::MetaOnly,
            ..base
        },
        3 => PipelineConfig {
            layout: Layout::Full,
            ..base
        },
        5 => PipelineConfig {
            set: 2,
            spectro: SpectroConfig::set2(),
            layout: Layout::SpecOnly,
            specaugment: Some(SpecAugmentConfig::default()),
            mixup: Some(Default::default()),
            ..base
        },
        4 => {
            return Err(Error::Experiment(
                4,
                "pretrained-weight transfer is out of scope; train with --init-from to start from a saved state".into(),
            ))
        }
        6 => {
            return Err(Error::Experiment(
                6,
                "heat-map analysis runs through the explain command".into(),
            ))
        }
        other => return Err(Error::Experiment(other, "unknown experiment id".into())),
    };
    pipeline.validate()?;
    Ok(ExperimentSpec {
        id,
        model: ModelConfig::default_for(pipeline.input_shape()),
        train: TrainConfig {
            epochs: EXPERIMENT_EPOCHS,
            patience: Some(EXPERIMENT_PATIENCE),
            seed,
            mixup: pipeline.mixup,
            ..TrainConfig::default()
        },
        pipeline,
        workers: 1,
    })
}

/// Freshly augmented training samples for one epoch.
pub fn epoch_samples(
    corpus: &CorpusData,
    records: &[&SpeakerRecord],
    bank: &NoiseBank,
    pipeline: &PipelineConfig,
    epoch: usize,
    workers: usize,
) -> Result<Vec<Sample>> {
    let per_speaker = par_map(records, workers, |r| {
        let mut rng = rng_for(pipeline.seed, &format!("train:{epoch}:{}", r.id));
        let examples = preprocess_clip(corpus.clip(&r.id)?, r, bank, pipeline, pipeline.mode, &mut rng)?;
        Ok(examples
            .into_iter()
            .map(|e| Sample {
                x: e.features,
                y: r.label.one_hot(),
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_speaker.into_iter().flatten().collect())
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub report: TrainReport,
}

/// Trains on the train split, early-stopping on the validation split when it
/// is non-empty.
pub fn train_model(corpus: &CorpusData, spec: &ExperimentSpec, init: Option<ModelState>) -> Result<TrainOutcome> {
    let bank = corpus.bank_with(spec.pipeline.noise_counts)?;
    let train_records = corpus.records(Split::Train);
    if train_records.is_empty() {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    let val = par_map(&corpus.records(Split::Val), spec.workers, |r| {
        eval_windows(r, corpus.clip(&r.id)?, &bank, &spec.pipeline)
    })?;
    let mut state = match init {
        Some(s) => {
            if s.config.input_shape != spec.model.input_shape {
                return Err(Error::Config(format!(
                    "initial state expects input {:?}, experiment produces {:?}",
                    s.config.input_shape, spec.model.input_shape
                )));
            }
            s
        }
        None => ModelState::init(spec.model.clone(), spec.pipeline.seed)?,
    };
    let report = train(
        &mut state,
        &spec.train,
        |epoch| epoch_samples(corpus, &train_records, &bank, &spec.pipeline, epoch, spec.workers),
        |s| {
            if val.is_empty() {
                Ok(None)
            } else {
                evaluate_prepared(s, &val).map(|r| Some(r.val_score()))
            }
        },
    )?;
    Ok(TrainOutcome { state, report })
}

/// Everything [`explain_window`] derives for one window.
#[derive(Debug, Clone)]
pub struct WindowExplanation {
    pub window_id: String,
    pub offset_secs: f64,
    pub features: FeatureMatrix,
    pub probability: f64,
    pub heat: HeatMap,
    pub spec: ComplexSpectrogram,
    pub mel: MelSpectrogram,
    /// Present when the layout contains a spectrogram.
    pub modified: Option<MelSpectrogram>,
}

impl WindowExplanation {
    pub fn predicted(&self) -> Label {
        if self.probability >= 0.5 {
            Label::Patient
        } else {
            Label::Control
        }
    }

    pub fn sonify(&self) -> Result<Option<AudioClip>> {
        match &self.modified {
            Some(m) => sonify(m, &self.spec.phase, &self.mel).map(Some),
            None => Ok(None),
        }
    }
}

/// Grad-CAM for window `index` of a speaker, using the same noise draw as
/// [`eval_windows`].
pub fn explain_window(
    state: &ModelState,
    pipeline: &PipelineConfig,
    bank: &NoiseBank,
    record: &SpeakerRecord,
    clip: &AudioClip,
    index: usize,
    class: ClassSign,
    target_layer: Option<&str>,
) -> Result<WindowExplanation> {
    let mut rng = rng_for(pipeline.seed, &format!("eval:{}", record.id));
    let noisy = inject_noise(clip, bank, record.label, &mut rng)?;
    let windows = make_windows(&noisy, record.label);
    let w = windows.get(index).ok_or_else(|| {
        Error::OutOfRange(format!("{} has {} windows, asked for {index}", record.id, windows.len()))
    })?;
    let analysis = analyze_window(w, pipeline)?;
    let features = assemble(Some(&analysis.mel), analysis.pitch.as_ref(), Some(record), pipeline.layout)?;
    let layer = target_layer.map_or_else(|| state.default_target_layer(), str::to_string);
    let heat = grad_cam(state, &features, &layer, class)?;
    let probability = predict_many(state, &[&features], 1)?[0];
    let modified = if pipeline.layout.needs_spectrogram() {
        Some(apply_heatmap(&analysis.mel, &spectrogram_region(&heat, pipeline.layout)?)?)
    } else {
        None
    };
    Ok(WindowExplanation {
        window_id: format!("{}_w{index}", record.id),
        offset_secs: w.offset_secs,
        features,
        probability,
        heat,
        spec: analysis.spec,
        mel: analysis.mel,
        modified,
    })
}

/// Writes panels, heat-map CSV and resynthesized audio for one explanation.
pub fn write_explanation(e: &WindowExplanation, layout: Layout, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let prefix = dir.join(&e.window_id);
    let mut written = Vec::new();
    let heat_csv = PathBuf::from(format!("{}_heatmap.csv", prefix.display()));
    write_matrix_csv(&e.heat.values, &heat_csv)?;
    written.push(heat_csv);
    if let Some(modified) = &e.modified {
        let region = spectrogram_region(&e.heat, layout)?;
        let files = export_panel(&e.mel, &region, modified, &prefix)?;
        written.extend([files.original, files.heat, files.modified, files.sidecar]);
        if let Some(audio) = e.sonify()? {
            let wav = PathBuf::from(format!("{}_attended.wav", prefix.display()));
            write_wav(&audio, &wav)?;
            written.push(wav);
        }
    }
    Ok(written)
}

/// Attention over frames within `margin_secs` of a pause versus the mean over
/// all frames, restricted to the spectrogram rows. `None` when no pause
/// touches the window.
pub fn pause_attention(
    heat: &HeatMap,
    layout: Layout,
    offset_secs: f64,
    pauses: &[(f64, f64)],
    spectro: &SpectroConfig,
    margin_secs: f64,
) -> Option<(f64, f64)> {
    let region = spectrogram_region(heat, layout).ok()?;
    let frames = region.ncols();
    let per_frame: Vec<f64> = region.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)).collect();
    let frame_time = |k: usize| offset_secs + (k * spectro.hop) as f64 / spectro.sample_rate as f64;
    let near: Vec<f64> = (0..frames)
        .filter(|&k| {
            let t = frame_time(k);
            pauses.iter().any(|&(a, b)| t >= a - margin_secs && t <= b + margin_secs)
        })
        .map(|k| per_frame[k])
        .collect();
    if near.is_empty() {
        return None;
    }
    let all = per_frame.iter().sum::<f64>() / frames as f64;
    Some((near.iter().sum::<f64>() / near.len() as f64, all))
}

pub struct ExperimentOutcome {
    pub spec: ExperimentSpec,
    pub state: ModelState,
    pub train_report: TrainReport,
    pub test: EvalReport,
}

impl ExperimentOutcome {
    pub fn table_csv(&self) -> String {
        format!("{TABLE_HEADER}\n{}\n", self.test.confusion.table_row(self.spec.id))
    }
}

/// Number of test speakers whose first window gets a Grad-CAM panel.
pub const PANEL_SPEAKERS: usize = 2;

/// Trains and tests one experiment; with `out_dir`, writes the checkpoint,
/// training curve, results table, per-speaker votes, attention report and
/// heat-map panels for a few test windows.
pub fn run_experiment(
    spec: &ExperimentSpec,
    corpus: &CorpusData,
    init: Option<ModelState>,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let TrainOutcome { state, report } = train_model(corpus, spec, init)?;
    let test = evaluate(&state, corpus, Split::Test, &spec.pipeline, spec.workers)?;
    let outcome = ExperimentOutcome {
        spec: spec.clone(),
        state,
        train_report: report,
        test,
    };
    if let Some(dir) = out_dir {
        write_experiment(&outcome, corpus, dir)?;
    }
    Ok(outcome)
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_experiment(outcome: &ExperimentOutcome, corpus: &CorpusData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = &outcome.spec;
    save_state(dir.join(CHECKPOINT_FILE), &outcome.state, &format!("exp={}\n{}", spec.id, spec.pipeline.to_kv()))?;
    write_file(dir.join("train_report.csv"), &outcome.train_report.to_csv())?;
    write_file(dir.join("results.csv"), &outcome.table_csv())?;
    write_file(dir.join("speakers.csv"), &outcome.test.speakers_csv())?;

    let bank = corpus.bank_with(spec.pipeline.noise_counts)?;
    let mut attention = format!("{ATTENTION_HEADER}\n");
    let panels = dir.join("panels");
    for r in corpus.records(Split::Test).into_iter().take(PANEL_SPEAKERS) {
        let e = explain_window(
            &outcome.state,
            &spec.pipeline,
            &bank,
            r,
            corpus.clip(&r.id)?,
            0,
            ClassSign::of(r.label),
            None,
        )?;
        attention.push_str(&attention_row(&e.window_id, e.predicted(), &e.heat, spec.pipeline.layout));
        attention.push('\n');
        write_explanation(&e, spec.pipeline.layout, &panels)?;
    }
    write_file(dir.join("attention.csv"), &attention)
}

/// Bias-probe settings: Experiment 1 inputs with a lighter network and
/// schedule, trained once with and once without noise injection.
pub fn probe_spec(seed: u64) -> ExperimentSpec {
    let pipeline = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let model = ModelConfig {
        blocks: [8, 16, 32, 32].into_iter().map(crate::model::ConvBlock::new).collect(),
        dense_units: 16,
        dropout_rate: 0.2,
        input_shape: pipeline.input_shape(),
    };
    ExperimentSpec {
        id: 1,
        pipeline,
        model,
        train: TrainConfig {
            epochs: 15,
            patience: Some(5),
            seed,
            ..TrainConfig::default()
        },
        workers: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmReport {
    pub with_injection: bool,
    pub normal: ConfusionMatrix,
    pub swapped: ConfusionMatrix,
}

impl ArmReport {
    /// Accuracy lost on the swapped set, in percentage points.
    pub fn drop_points(&self) -> f64 {
        self.normal.accuracy_percent() - self.swapped.accuracy_percent()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub seed: u64,
    pub injection_on: ArmReport,
    pub injection_off: ArmReport,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,injection,normal_acc,swapped_acc,drop_points\n");
        for arm in [&self.injection_on, &self.injection_off] {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2}",
                self.seed,
                if arm.with_injection { "on" } else { "off" },
                arm.normal.accuracy_percent(),
                arm.swapped.accuracy_percent(),
                arm.drop_points()
            );
        }
        out
    }
}

/// Trains one arm and scores it on the test split as recorded and with each
/// speaker's environment noise swapped to the other class's channel.
pub fn probe_arm(corpus: &CorpusData, cfg: &ExperimentSpec, with_injection: bool) -> Result<ArmReport> {
    let counts = if with_injection {
        cfg.pipeline.noise_counts
    } else {
        NoiseCounts::NONE
    };
    let pipeline = PipelineConfig {
        noise_counts: counts,
        ..cfg.pipeline.clone()
    };
    let spec = ExperimentSpec {
        pipeline: pipeline.clone(),
        ..cfg.clone()
    };
    let TrainOutcome { state, .. } = train_model(corpus, &spec, None)?;
    let bank = corpus.bank_with(counts)?;
    let test = corpus.records(Split::Test);
    let normal = par_map(&test, cfg.workers, |r| eval_windows(r, corpus.clip(&r.id)?, &bank, &pipeline))?;
    let swapped = par_map(&test, cfg.workers, |r| eval_windows(r, &corpus.swapped_clip(r)?, &bank, &pipeline))?;
    Ok(ArmReport {
        with_injection,
        normal: evaluate_prepared(&state, &normal)?.confusion,
        swapped: evaluate_prepared(&state, &swapped)?.confusion,
    })
}

pub fn bias_probe(corpus: &CorpusData, cfg: &ExperimentSpec) -> Result<ProbeReport> {
    Ok(ProbeReport {
        seed: cfg.pipeline.seed,
        injection_on: probe_arm(corpus, cfg, true)?,
        injection_off: probe_arm(corpus, cfg, false)?,
    })
}

/// Mean of the heat map over each spectrogram frame.
pub fn frame_profile(heat: &Array2<f64>) -> Vec<f64> {
    heat.columns().into_iter().map(|c| c.mean().unwrap_or(0.0)).collect()
}
