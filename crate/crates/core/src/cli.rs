//! Command-line front end. Every command writes into a staging directory
//! next to `--out` and moves the results into place only on success.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio_io::{load_for_pipeline, write_wav};
use crate::config::KvConfig;
use crate::corpus::{generate_corpus, GenProfile, Split};
use crate::dsp::{log_mel, read_matrix_csv, stft, SpectroConfig};
use crate::error::{Error, Result};
use crate::eval::{
    bias_probe, evaluate, experiment_spec, explain_window, probe_spec, run_experiment, write_explanation,
    CorpusData, ExperimentSpec, TABLE_HEADER,
};
use crate::explain::{apply_heatmap, attention_row, sonify, ClassSign, ATTENTION_HEADER};
use crate::model::{load_checkpoint, load_state};
use crate::pipeline::{make_windows, PipelineConfig};

pub const EFFECTIVE_CONFIG: &str = "effective.cfg";

#[derive(Debug, Parser)]
#[command(name = "spira", version, about = "Speech-based respiratory-insufficiency screening toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Preprocessing threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 60)]
        patients: usize,
        #[arg(long, default_value_t = 60)]
        controls: usize,
    },
    /// Train one experiment and test it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        exp: u32,
        #[arg(long)]
        corpus: PathBuf,
        /// Start from a saved checkpoint instead of a fresh initialization.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Noise-confound probe: train with and without noise injection.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Seeds to run, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Grad-CAM panels, attention report and attended-audio WAV for one window.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// `<speaker>_w<k>`, or `w<k>` for the k-th window of the split.
        #[arg(long)]
        window: String,
        #[arg(long, default_value = "patient")]
        class: ClassSign,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Resynthesize a WAV through the log-mel representation, optionally
    /// masked by a heat map CSV.
    Resynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Probe { common, .. }
            | Command::Explain { common, .. }
            | Command::Resynth { common, .. } => common,
        }
    }
}

/// Exit code for a failed command: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::UnknownToken { .. }
        | Error::Experiment(..)
        | Error::UnknownLayer(_)
        | Error::OutOfRange(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_kv(common: &Common, env: impl IntoIterator<Item = (String, String)>) -> Result<KvConfig> {
    let mut kv = match &common.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    kv.apply_env(env);
    kv.apply_overrides(common.overrides.iter().map(String::as_str))?;
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Runs `body` against a fresh staging directory and moves its contents into
/// `out` on success; on failure the staging directory is deleted.
fn staged(out: &Path, body: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let stage = staging_dir(out);
    if stage.exists() {
        std::fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    std::fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    let result = body(&stage).and_then(|()| publish(&stage, out));
    if stage.exists() {
        let _ = std::fs::remove_dir_all(&stage);
    }
    result
}

fn publish(stage: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = std::fs::read_dir(stage).map_err(|e| Error::io(stage, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(stage, e))?;
        let target = out.join(entry.file_name());
        if target.is_dir() {
            std::fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        std::fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn echo_config(dir: &Path, text: &str) -> Result<()> {
    log::info!("effective config:\n{text}");
    write_text(dir.join(EFFECTIVE_CONFIG), text)
}

pub fn execute(command: &Command, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let common = command.common();
    let mut kv = load_kv(common, env)?;
    let seed: u64 = kv.get_or("seed", 0)?;
    match command {
        Command::Gen { patients, controls, .. } => {
            let profile = GenProfile::from_kv(&mut kv)?;
            kv.finish()?;
            staged(&common.out, |dir| {
                generate_corpus(dir, *patients, *controls, seed, &profile, None)?;
                echo_config(
                    dir,
                    &format!("patients={patients}\ncontrols={controls}\nseed={seed}\n{}", profile.to_kv()),
                )
            })
        }
        Command::Train { exp, corpus, init_from, .. } => {
            let mut spec = experiment_spec(*exp, seed)?.read(&mut kv)?;
            kv.finish()?;
            spec.workers = common.workers;
            let init = init_from.as_ref().map(load_state).transpose()?;
            let data = CorpusData::load(corpus)?;
            staged(&common.out, |dir| {
                echo_config(dir, &spec.to_kv())?;
                let outcome = run_experiment(&spec, &data, init, Some(dir))?;
                println!("{TABLE_HEADER}\n{}", outcome.test.confusion.table_row(spec.id));
                Ok(())
            })
        }
        Command::Eval {
            checkpoint, corpus, split, ..
        } => {
            let (state, mut saved) = load_checkpoint(checkpoint)?;
            let exp: u32 = saved.get_or("exp", 1)?;
            let pipeline = saved_pipeline(&mut saved, &mut kv, seed)?;
            let data = CorpusData::load(corpus)?;
            staged(&common.out, |dir| {
                echo_config(dir, &format!("exp={exp}\nsplit={split}\n{}", pipeline.to_kv()))?;
                let report = evaluate(&state, &data, *split, &pipeline, common.workers)?;
                let table = format!("{TABLE_HEADER}\n{}\n", report.confusion.table_row(exp));
                print!("{table}");
                write_text(dir.join("results.csv"), &table)?;
                write_text(dir.join("speakers.csv"), &report.speakers_csv())
            })
        }
        Command::Probe { corpus, seeds, .. } => {
            let specs = seeds
                .iter()
                .map(|&s| {
                    let mut k = kv.clone();
                    k.set("seed", s);
                    let spec = probe_spec(s).read(&mut k);
                    k.finish()?;
                    spec.map(|spec| ExperimentSpec {
                        workers: common.workers,
                        ..spec
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let data = CorpusData::load(corpus)?;
            staged(&common.out, |dir| {
                let mut config = String::new();
                let mut csv = String::new();
                for spec in &specs {
                    config.push_str(&spec.to_kv());
                    let report = bias_probe(&data, spec)?;
                    let text = report.to_csv();
                    if csv.is_empty() {
                        csv.push_str(&text);
                    } else {
                        csv.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
                    }
                }
                print!("{csv}");
                echo_config(dir, &config)?;
                write_text(dir.join("probe.csv"), &csv)
            })
        }
        Command::Explain {
            checkpoint,
            corpus,
            window,
            class,
            layer,
            split,
            ..
        } => {
            let (state, mut saved) = load_checkpoint(checkpoint)?;
            let _: u32 = saved.get_or("exp", 1)?;
            let pipeline = saved_pipeline(&mut saved, &mut kv, seed)?;
            let data = CorpusData::load(corpus)?;
            let (record, index) = find_window(&data, *split, window)?;
            let bank = data.bank_with(pipeline.noise_counts)?;
            staged(&common.out, |dir| {
                echo_config(
                    dir,
                    &format!(
                        "window={}_w{index}\nclass={class}\nlayer={}\n{}",
                        record.id,
                        layer.clone().unwrap_or_else(|| state.default_target_layer()),
                        pipeline.to_kv()
                    ),
                )?;
                let e = explain_window(
                    &state,
                    &pipeline,
                    &bank,
                    &record,
                    data.clip(&record.id)?,
                    index,
                    *class,
                    layer.as_deref(),
                )?;
                let row = attention_row(&e.window_id, e.predicted(), &e.heat, pipeline.layout);
                write_text(dir.join("attention.csv"), &format!("{ATTENTION_HEADER}\n{row}\n"))?;
                for p in write_explanation(&e, pipeline.layout, dir)? {
                    println!("{}", p.file_name().unwrap_or_default().to_string_lossy());
                }
                Ok(())
            })
        }
        Command::Resynth { input, heatmap, .. } => {
            let set: u32 = kv.get_or("set", 1)?;
            kv.finish()?;
            let config = SpectroConfig::from_set(set)?;
            let clip = load_for_pipeline(input)?;
            let heat = heatmap.as_ref().map(read_matrix_csv).transpose()?;
            staged(&common.out, |dir| {
                echo_config(
                    dir,
                    &format!(
                        "input={}\nset={set}\nheatmap={}\n",
                        input.display(),
                        heatmap.as_ref().map_or(String::new(), |p| p.display().to_string())
                    ),
                )?;
                let spec = stft(&clip, &config)?;
                let mel = log_mel(&spec, &config)?;
                let modified = match &heat {
                    Some(h) => apply_heatmap(&mel, h)?,
                    None => mel.clone(),
                };
                let audio = sonify(&modified, &spec.phase, &mel)?;
                write_wav(&audio, dir.join("resynth.wav"))?;
                Ok(())
            })
        }
    }
}

/// Pipeline settings stored in a checkpoint, with command-line overrides.
fn saved_pipeline(saved: &mut KvConfig, kv: &mut KvConfig, seed: u64) -> Result<PipelineConfig> {
    let mut pipeline = PipelineConfig::default().read(saved)?;
    saved.finish()?;
    if kv.contains("seed") {
        pipeline.seed = seed;
    }
    let pipeline = pipeline.read(kv)?;
    kv.finish()?;
    Ok(pipeline)
}

fn find_window(data: &CorpusData, split: Split, window: &str) -> Result<(crate::corpus::SpeakerRecord, usize)> {
    let records = data.records(split);
    let count = |r: &crate::corpus::SpeakerRecord| -> Result<usize> {
        Ok(make_windows(data.clip(&r.id)?, r.label).len())
    };
    if let Some((id, k)) = window.rsplit_once("_w") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad window id `{window}`")))?;
        let r = records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("speaker `{id}` is not in the {split} split")))?;
        return Ok(((*r).clone(), k));
    }
    let mut k: usize = window
        .strip_prefix('w')
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Config(format!("bad window id `{window}`; use <speaker>_w<k> or w<k>")))?;
    for r in records {
        let n = count(r)?;
        if k < n {
            return Ok((r.clone(), k));
        }
        k -= n;
    }
    Err(Error::OutOfRange(format!("window `{window}` is past the end of the {split} split")))
}
