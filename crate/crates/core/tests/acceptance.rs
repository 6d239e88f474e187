//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the heavy training criteria execute one after another and
//! their wall-clock budgets are measured without contention.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 2 3 7`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use spira::audio_io::AudioClip;
use spira::augment::{draw_lambda, mixup, spec_augment_with_masks, MaskAxis, MixupConfig, SpecAugmentConfig};
use spira::corpus::{generate_corpus, GenProfile, Label, Sex, Split, SpeakerRecord};
use spira::dsp::{estimate_f0, inverse_log_mel, istft, log_mel, stft, SpectroConfig};
use spira::eval::{
    bias_probe, experiment_spec, explain_window, probe_spec, run_experiment, vote, CorpusData, ExperimentOutcome,
};
use spira::explain::{grad_cam, spectrogram_region, ClassSign};
use spira::features::{assemble, FeatureMatrix, Layout};
use spira::model::layers::*;
use spira::model::{backward, forward_batch, ConvBlock, ModelConfig, ModelState, Pass};
use spira::pipeline::{analyze_window, make_windows, PipelineConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(budget: Duration, elapsed: Duration) -> Result<(), String> {
    check(elapsed <= budget, || format!("took {elapsed:.1?}, budget {budget:.0?}"))
}

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (signal / noise).log10()
}

/// Shared state: the default corpus and the Experiment 1 run.
struct Shared {
    _dir: tempfile::TempDir,
    corpus: CorpusData,
    exp1: Option<(ExperimentOutcome, Duration)>,
}

impl Shared {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let t = Instant::now();
        generate_corpus(dir.path(), 60, 60, 0, &GenProfile::default(), None).expect("default corpus");
        let corpus = CorpusData::load(dir.path()).expect("load corpus");
        eprintln!("default corpus generated in {:.1?}", t.elapsed());
        Self {
            _dir: dir,
            corpus,
            exp1: None,
        }
    }

    fn exp1(&mut self) -> Result<&(ExperimentOutcome, Duration), String> {
        if self.exp1.is_none() {
            let t = Instant::now();
            let spec = experiment_spec(1, 0).map_err(|e| e.to_string())?;
            let outcome = run_experiment(&spec, &self.corpus, None, None).map_err(|e| e.to_string())?;
            self.exp1 = Some((outcome, t.elapsed()));
        }
        Ok(self.exp1.as_ref().expect("just set"))
    }
}

fn c1_headline_substitute(shared: &mut Shared) -> Outcome {
    let (outcome, elapsed) = shared.exp1()?;
    let m = outcome.test.confusion;
    let acc = m.accuracy();
    let detail = format!(
        "test acc {:.2}% (tp {} tn {} fp {} fn {}), best epoch {}, {:.0?}",
        100.0 * acc,
        m.tp,
        m.tn,
        m.fp,
        m.fn_,
        outcome.train_report.best_epoch,
        elapsed
    );
    check(m.total() == 30, || format!("expected 30 test speakers, got {}", m.total()))?;
    check(acc >= 0.90, || detail.clone())?;
    within(Duration::from_secs(15 * 60), *elapsed).map_err(|e| format!("{detail}; {e}"))?;
    Ok(detail)
}

fn c2_shapes() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<f64> = (0..16000 * 4).map(|_| rng.random_range(-0.3..0.3)).collect();
    let clip = AudioClip::new(samples, 16000, "w");
    let window = &make_windows(&clip, Label::Patient)[0];
    let record = SpeakerRecord {
        id: "w".into(),
        label: Label::Patient,
        age: 50,
        sex: Sex::Female,
        clip_path: PathBuf::from("w.wav"),
    };
    let mut shapes = Vec::new();
    for (layout, want) in [
        (Layout::SpecOnly, (80, 401)),
        (Layout::MetaOnly, (40, 401)),
        (Layout::Full, (120, 401)),
    ] {
        let cfg = PipelineConfig {
            layout,
            ..PipelineConfig::default()
        };
        let a = analyze_window(window, &cfg).map_err(|e| e.to_string())?;
        check(a.mel.values.dim() == (80, 401), || format!("log-mel {:?}", a.mel.values.dim()))?;
        let f = assemble(Some(&a.mel), a.pitch.as_ref(), Some(&record), layout).map_err(|e| e.to_string())?;
        check(f.values.dim() == want, || format!("{layout}: {:?}, want {want:?}", f.values.dim()))?;
        shapes.push(format!("{layout} {}x{}", want.0, want.1));
    }
    within(Duration::from_secs(1), t.elapsed())?;
    Ok(format!("{}, {:.0?}", shapes.join(", "), t.elapsed()))
}

fn c3_dsp() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise: Vec<f64> = (0..32000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let clip = AudioClip::new(noise.clone(), 16000, "n");
    let mut worst_stft = f64::INFINITY;
    for cfg in [SpectroConfig::set1(), SpectroConfig::set2()] {
        let y = istft(&stft(&clip, &cfg).map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
        worst_stft = worst_stft.min(snr_db(&noise, &y.samples));
    }
    check(worst_stft >= 40.0, || format!("stft round trip {worst_stft:.1} dB"))?;

    let cfg = SpectroConfig::set1();
    let mut worst_f0 = 0.0f64;
    for f in (80..=400).step_by(10) {
        let f = f as f64;
        let x: Vec<f64> = (0..16000).map(|i| 0.5 * (2.0 * PI * f * i as f64 / 16000.0).sin()).collect();
        let track = estimate_f0(&AudioClip::new(x, 16000, "s"), &cfg, 60.0, 500.0).map_err(|e| e.to_string())?;
        let voiced: Vec<f64> = track.f0.iter().copied().filter(|v| *v > 0.0).collect();
        check(!voiced.is_empty(), || format!("{f} Hz: no voiced frames"))?;
        let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
        worst_f0 = worst_f0.max((mean - f).abs());
    }
    check(worst_f0 <= 3.0, || format!("F0 error {worst_f0:.2} Hz"))?;

    let mut worst_mel = f64::INFINITY;
    for (cfg, f0) in [(SpectroConfig::set1(), 120.0), (SpectroConfig::set1(), 210.0), (SpectroConfig::set2(), 160.0)] {
        let x: Vec<f64> = (0..16000)
            .map(|i| {
                let t = i as f64 / 16000.0;
                (1..=5).map(|h| 0.4 * (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum()
            })
            .collect();
        let clip = AudioClip::new(x.clone(), 16000, "h");
        let s = stft(&clip, &cfg).map_err(|e| e.to_string())?;
        let mel = log_mel(&s, &cfg).map_err(|e| e.to_string())?;
        let y = inverse_log_mel(&mel, &s.phase, &cfg).map_err(|e| e.to_string())?;
        worst_mel = worst_mel.min(snr_db(&x, &y.samples));
    }
    check(worst_mel >= 10.0, || format!("inverse log-mel {worst_mel:.1} dB"))?;
    within(Duration::from_secs(30), t.elapsed())?;
    Ok(format!(
        "stft {worst_stft:.1} dB, F0 max err {worst_f0:.2} Hz, inverse mel {worst_mel:.1} dB, {:.1?}",
        t.elapsed()
    ))
}

/// Relative error with a small absolute floor for entries that are zero.
fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-9
}

fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
}

/// Central difference of `loss` with respect to every entry of `x`.
fn numeric_grad<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>, mut loss: impl FnMut(&ndarray::Array<f64, D>) -> f64) -> ndarray::Array<f64, D> {
    let h = 1e-6;
    let mut g = x.clone();
    let mut probe = x.clone();
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = *probe.iter().nth(i).expect("index");
        *probe.iter_mut().nth(i).expect("index") = orig + h;
        let up = loss(&probe);
        *probe.iter_mut().nth(i).expect("index") = orig - h;
        let down = loss(&probe);
        *probe.iter_mut().nth(i).expect("index") = orig;
        *gi = (up - down) / (2.0 * h);
    }
    g
}

fn compare<D: ndarray::Dimension>(name: &str, a: &ndarray::Array<f64, D>, n: &ndarray::Array<f64, D>) -> Result<usize, String> {
    for (x, y) in a.iter().zip(n) {
        check(close(*x, *y), || format!("{name}: analytic {x} vs numeric {y}"))?;
    }
    Ok(a.len())
}

fn c4_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;

    // conv, stride 1 and 2
    for stride in [1, 2] {
        let x = rand4(&mut rng, (2, 2, 5, 6));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let y = conv2d_forward(&x, &w, Some(&b), stride);
        let r = rand4(&mut rng, y.dim());
        let g = conv2d_backward(&x, &w, stride, &r, true);
        let f = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| (conv2d_forward(x, w, Some(b), stride) * &r).sum();
        checked += compare("conv dx", g.dx.as_ref().expect("dx"), &numeric_grad(&x, |x| f(x, &w, &b)))?;
        checked += compare("conv dw", &g.dw, &numeric_grad(&w, |w| f(&x, w, &b)))?;
        checked += compare("conv db", &g.db, &numeric_grad(&b, |b| f(&x, &w, b)))?;
    }

    // batch norm with batch statistics
    let x = rand4(&mut rng, (3, 2, 3, 4));
    let gamma = Array1::from_vec(vec![1.3, -0.7]);
    let beta = Array1::from_vec(vec![0.2, 0.5]);
    let (y, cache) = batchnorm_forward(&x, &gamma, &beta, None);
    let r = rand4(&mut rng, y.dim());
    let (dx, dgamma, dbeta) = batchnorm_backward(&cache, &gamma, &r);
    let f = |x: &Array4<f64>, g: &Array1<f64>, b: &Array1<f64>| (batchnorm_forward(x, g, b, None).0 * &r).sum();
    checked += compare("bn dx", &dx, &numeric_grad(&x, |x| f(x, &gamma, &beta)))?;
    checked += compare("bn dgamma", &dgamma, &numeric_grad(&gamma, |g| f(&x, g, &beta)))?;
    checked += compare("bn dbeta", &dbeta, &numeric_grad(&beta, |b| f(&x, &gamma, b)))?;

    // relu, away from the kink
    let x = rand4(&mut rng, (2, 2, 3, 3)).mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let r = rand4(&mut rng, x.dim());
    let out = relu_forward(&x);
    checked += compare("relu", &relu_backward(&out, &r), &numeric_grad(&x, |x| (relu_forward(x) * &r).sum()))?;

    // max pool with a ragged edge; random values have no ties
    let x = rand4(&mut rng, (2, 2, 5, 7));
    let (y, idx) = maxpool_forward(&x, 2, 2);
    let r = rand4(&mut rng, y.dim());
    checked += compare(
        "maxpool",
        &maxpool_backward(&idx, x.dim(), &r),
        &numeric_grad(&x, |x| (maxpool_forward(x, 2, 2).0 * &r).sum()),
    )?;

    // global average pool
    let x = rand4(&mut rng, (2, 3, 4, 5));
    let r = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
    checked += compare("gap", &gap_backward(x.dim(), &r), &numeric_grad(&x, |x| (gap_forward(x) * &r).sum()))?;

    // dense
    let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
    let b = Array1::from_vec(vec![0.1, -0.2]);
    let r = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
    let (dx, dw, db) = dense_backward(&x, &w, &r);
    let f = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| (dense_forward(x, w, b) * &r).sum();
    checked += compare("dense dx", &dx, &numeric_grad(&x, |x| f(x, &w, &b)))?;
    checked += compare("dense dw", &dw, &numeric_grad(&w, |w| f(&x, w, &b)))?;
    checked += compare("dense db", &db, &numeric_grad(&b, |b| f(&x, &w, b)))?;

    // cross-entropy on the logit
    for (z, y) in [(-3.0, 1.0), (0.4, 0.0), (2.0, 0.3)] {
        let analytic = sigmoid(z) - y;
        let h = 1e-6;
        let numeric = (bce_with_logit(z + h, y) - bce_with_logit(z - h, y)) / (2.0 * h);
        check(close(analytic, numeric), || format!("bce at {z}: {analytic} vs {numeric}"))?;
        checked += 1;
    }

    // end-to-end tiny network, with and without batch norm
    for bn in [true, false] {
        let cfg = ModelConfig {
            blocks: vec![
                ConvBlock {
                    batch_norm: bn,
                    ..ConvBlock::new(3)
                },
                ConvBlock {
                    batch_norm: bn,
                    stride: 2,
                    ..ConvBlock::new(2)
                },
            ],
            dense_units: 4,
            dropout_rate: 0.0,
            input_shape: (8, 10),
        };
        let mut state = ModelState::init(cfg, 9).map_err(|e| e.to_string())?;
        let x = rand4(&mut rng, (3, 1, 8, 10));
        let ys = [1.0, 0.0, 1.0];
        let loss_of = |s: &ModelState| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let tape = forward_batch(s, &x, Pass::Train(&mut r)).expect("forward");
            tape.logits.iter().zip(&ys).map(|(&z, &y)| bce_with_logit(z, y)).sum::<f64>()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let tape = forward_batch(&state, &x, Pass::Train(&mut r)).map_err(|e| e.to_string())?;
        let dl: Vec<f64> = tape.probabilities.iter().zip(&ys).map(|(p, y)| p - y).collect();
        let grads = backward(&state, &tape, &dl).map_err(|e| e.to_string())?;
        for i in 0..state.params.len() {
            let name = state.params.names[i].clone();
            let base: ArrayD<f64> = state.params.tensors[i].clone();
            let numeric = numeric_grad(&base, |p: &ArrayD<f64>| {
                let saved = std::mem::replace(&mut state.params.tensors[i], p.clone());
                let l = loss_of(&state);
                state.params.tensors[i] = saved;
                l
            });
            checked += compare(&format!("net {name}"), &grads.params.tensors[i], &numeric)?;
        }
        let _ = IxDyn(&[0]);
    }
    within(Duration::from_secs(60), t.elapsed())?;
    Ok(format!("{checked} partial derivatives within 1e-3, {:.1?}", t.elapsed()))
}

fn c5_augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xi = FeatureMatrix::raw(Array2::from_shape_fn((80, 401), |_| rng.random_range(-5.0..0.0)), Layout::SpecOnly);
    let xj = FeatureMatrix::raw(Array2::from_shape_fn((80, 401), |_| rng.random_range(-5.0..0.0)), Layout::SpecOnly);
    let (yi, yj) = ([1.0, 0.0], [0.0, 1.0]);
    let m = |l: f64| mixup(&xi, yi, &xj, yj, l).map_err(|e| e.to_string());
    let (x1, y1) = m(1.0)?;
    let (x0, y0) = m(0.0)?;
    let (xh, yh) = m(0.5)?;
    check(x1.values == xi.values && y1 == yi, || "lambda 1 endpoint".into())?;
    check(x0.values == xj.values && y0 == yj, || "lambda 0 endpoint".into())?;
    let mid_ok = xh
        .values
        .iter()
        .zip(xi.values.iter().zip(&xj.values))
        .all(|(m, (a, b))| *m == 0.5 * a + 0.5 * b);
    check(mid_ok && yh == [0.5, 0.5], || "midpoint".into())?;

    let cfg = SpecAugmentConfig::default();
    check(cfg.max_freq == 8, || format!("F = {}", cfg.max_freq))?;
    let mel = spira::dsp::MelSpectrogram {
        values: xi.values.clone(),
        config: SpectroConfig::set1(),
    };
    for _ in 0..500 {
        let (out, masks) = spec_augment_with_masks(&mel, &cfg, &mut rng).map_err(|e| e.to_string())?;
        for mk in &masks {
            let bound = match mk.axis {
                MaskAxis::Frequency => cfg.max_freq,
                MaskAxis::Time => cfg.max_time,
            };
            check(mk.len <= bound, || format!("mask {mk:?} exceeds {bound}"))?;
        }
        for ((r, c), v) in out.values.indexed_iter() {
            if !masks.iter().any(|mk| mk.covers(r, c)) {
                check(v.to_bits() == mel.values[[r, c]].to_bits(), || format!("unmasked cell ({r},{c}) changed"))?;
            }
        }
    }

    let mx = MixupConfig::default();
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let l = draw_lambda(&mx, &mut rng).map_err(|e| e.to_string())?;
        check((0.0..=1.0).contains(&l), || format!("lambda {l}"))?;
        sum += l;
    }
    let mean = sum / n as f64;
    check((mean - 0.5).abs() <= 0.01, || format!("lambda mean {mean}"))?;
    Ok(format!("endpoints and midpoint exact, 500 masked draws bounded, lambda mean {mean:.4}"))
}

fn c6_voting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let probs: Vec<(f64, f64)> = (0..n).map(|_| rng.random::<f64>()).map(|p| (p, 1.0 - p)).collect();
        let v = vote(&probs).map_err(|e| e.to_string())?;
        let mut sums = [0.0, 0.0];
        for (p, c) in &probs {
            sums[0] += p;
            sums[1] += c;
        }
        let want = if sums[0] >= sums[1] { Label::Patient } else { Label::Control };
        check(v.label == want && v.patient_sum == sums[0] && v.control_sum == sums[1], || {
            format!("vote {v:?} vs sums {sums:?}")
        })?;
    }
    let five = AudioClip::new(vec![0.1; 5 * 16000], 16000, "five");
    let windows = make_windows(&five, Label::Control);
    check(windows.len() == 2, || format!("5 s clip gave {} windows", windows.len()))?;
    let v = vote(&[(0.3, 0.7), (0.8, 0.2)]).map_err(|e| e.to_string())?;
    check(v.label == Label::Patient, || "5 s case".into())?;
    check(vote(&[(0.5, 0.5), (0.5, 0.5)]).map_err(|e| e.to_string())?.label == Label::Patient, || {
        "tie must go to patient".into()
    })?;
    Ok("1000 random sets match re-summation, 5 s clip gives 2 windows, tie goes to patient".into())
}

fn c7_gradcam() -> Outcome {
    let cfg = ModelConfig {
        blocks: vec![ConvBlock {
            out_channels: 1,
            kernel: (1, 1),
            stride: 1,
            pool: (1, 1),
            batch_norm: false,
        }],
        dense_units: 0,
        dropout_rate: 0.0,
        input_shape: (3, 5),
    };
    let mut state = ModelState::zeroed(cfg).map_err(|e| e.to_string())?;
    *state.params.get_mut("block0.conv.weight").expect("weight") = ArrayD::ones(IxDyn(&[1, 1, 1, 1]));
    *state.params.get_mut("out.weight").expect("weight") = ArrayD::ones(IxDyn(&[1, 1]));
    // With identity conv, ReLU, GAP and a unit output weight, the channel
    // weight is 1/(h·w) > 0 and the map is relu(x) / max relu(x).
    let x = Array2::from_shape_vec((3, 5), vec![0.2, -1.0, 3.0, 0.0, 1.1, 2.5, -0.4, 0.7, 1.9, -2.0, 0.05, 4.0, 0.3, -0.1, 2.2])
        .expect("shape");
    let heat = grad_cam(&state, &FeatureMatrix::raw(x.clone(), Layout::SpecOnly), "block0", ClassSign::Patient)
        .map_err(|e| e.to_string())?;
    let peak = x.iter().cloned().fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (h, v) in heat.values.iter().zip(&x) {
        worst = worst.max((h - v.max(0.0) / peak).abs());
    }
    check(worst <= 1e-6, || format!("identity network error {worst:e}"))?;

    *state.params.get_mut("out.weight").expect("weight") = ArrayD::zeros(IxDyn(&[1, 1]));
    let zero = grad_cam(&state, &FeatureMatrix::raw(x, Layout::SpecOnly), "block0", ClassSign::Patient)
        .map_err(|e| e.to_string())?;
    check(zero.all_zero && zero.values.iter().all(|&v| v == 0.0), || "zero-gradient map not flagged".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..5 {
        let cfg = ModelConfig {
            blocks: vec![ConvBlock::new(4), ConvBlock::new(4), ConvBlock::new(6)],
            dense_units: 8,
            dropout_rate: 0.0,
            input_shape: (24, 40),
        };
        let state = ModelState::init(cfg, seed).map_err(|e| e.to_string())?;
        let x = FeatureMatrix::raw(Array2::from_shape_fn((24, 40), |_| rng.random_range(-3.0..0.0)), Layout::SpecOnly);
        for layer in state.layer_names() {
            for class in [ClassSign::Patient, ClassSign::Control] {
                let h = grad_cam(&state, &x, &layer, class).map_err(|e| e.to_string())?;
                let max = h.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = h.values.iter().cloned().fold(f64::INFINITY, f64::min);
                check(min >= 0.0 && max <= 1.0, || format!("{layer}: range [{min}, {max}]"))?;
                check(h.all_zero || (max - 1.0).abs() < 1e-12, || format!("{layer}: max {max}"))?;
            }
        }
    }
    Ok(format!("identity case error {worst:.1e}, zero map flagged, 30 random maps within [0, 1]"))
}

fn c8_bias_probe(shared: &Shared) -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..3 {
        let r = bias_probe(&shared.corpus, &probe_spec(seed)).map_err(|e| e.to_string())?;
        let (on, off) = (r.injection_on.drop_points(), r.injection_off.drop_points());
        lines.push(format!("seed {seed}: drop on {on:.1} / off {off:.1}"));
        if !(off > on) {
            failures.push(format!("seed {seed}: off drop {off:.1} not above on drop {on:.1}"));
        }
        if on > 10.0 {
            failures.push(format!("seed {seed}: on drop {on:.1} > 10"));
        }
        eprintln!("{}", r.to_csv().trim_end());
    }
    let detail = format!("{}, {:.0?}", lines.join("; "), t.elapsed());
    if !failures.is_empty() {
        return Err(format!("{detail}; {}", failures.join("; ")));
    }
    within(Duration::from_secs(45 * 60), t.elapsed()).map_err(|e| format!("{detail}; {e}"))?;
    Ok(detail)
}

fn c9_pause_attention(shared: &mut Shared) -> Outcome {
    let spec = experiment_spec(1, 0).map_err(|e| e.to_string())?;
    let state = shared.exp1()?.0.state.clone();
    let corpus = &shared.corpus;
    let bank = corpus.bank_with(spec.pipeline.noise_counts).map_err(|e| e.to_string())?;
    let hop_secs = spec.pipeline.spectro.hop as f64 / spec.pipeline.spectro.sample_rate as f64;
    let (mut above, mut counted, mut no_pause) = (0usize, 0usize, 0usize);
    for r in corpus.records(Split::Test).into_iter().filter(|r| r.label == Label::Patient) {
        let clip = corpus.clip(&r.id).map_err(|e| e.to_string())?;
        let pauses = corpus.pauses.get(&r.id).cloned().unwrap_or_default();
        for k in 0..make_windows(clip, r.label).len() {
            let e = explain_window(&state, &spec.pipeline, &bank, r, clip, k, ClassSign::Patient, None)
                .map_err(|e| e.to_string())?;
            if e.predicted() != Label::Patient {
                continue;
            }
            let region = spectrogram_region(&e.heat, spec.pipeline.layout).map_err(|e| e.to_string())?;
            let per_frame: Vec<f64> = region.columns().into_iter().map(|c| c.sum() / c.len() as f64).collect();
            let near: Vec<f64> = per_frame
                .iter()
                .enumerate()
                .filter(|(i, _)| {
                    let t = e.offset_secs + *i as f64 * hop_secs;
                    pauses.iter().any(|&(a, b)| t >= a - 0.1 && t <= b + 0.1)
                })
                .map(|(_, v)| *v)
                .collect();
            if near.is_empty() {
                no_pause += 1;
                continue;
            }
            counted += 1;
            let all = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
            if near.iter().sum::<f64>() / near.len() as f64 > all {
                above += 1;
            }
        }
    }
    check(counted > 0, || "no correctly classified patient windows with pauses".into())?;
    let frac = above as f64 / counted as f64;
    let detail = format!(
        "{above}/{counted} windows ({:.1}%) attend more near pauses; {no_pause} windows without pauses skipped",
        100.0 * frac
    );
    check(frac >= 0.70, || detail.clone())?;
    Ok(detail)
}

fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("prefix").display().to_string();
                let digest = Sha256::digest(std::fs::read(&p).expect("readable file"));
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

fn spira_cmd(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spira"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("`spira {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn c10_reproducibility() -> Outcome {
    let t = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| root.path().join(s).display().to_string();
    let tiny = [
        "--set",
        "model.blocks=4:3x3:1:2x2:bn,4:3x3:1:2x2:bn",
        "--set",
        "model.dense_units=4",
        "--set",
        "train.epochs=2",
    ];
    let mut compared = Vec::new();
    // Reruns use identical inputs: the first corpus and first checkpoint.
    let corpus = p("corpus_a");
    let ckpt = format!("{}/model.ckpt", p("train_a"));
    for run in ["a", "b"] {
        spira_cmd(&["gen", "--patients", "4", "--controls", "4", "--seed", "3", "--out", &p(&format!("corpus_{run}")), "--workers", "1"])?;
        let mut train = vec!["train", "--exp", "1", "--corpus", &corpus, "--seed", "0", "--workers", "1"];
        train.extend(tiny);
        let train_out = p(&format!("train_{run}"));
        train.extend(["--out", &train_out]);
        spira_cmd(&train)?;
        spira_cmd(&["eval", "--checkpoint", &ckpt, "--corpus", &corpus, "--out", &p(&format!("eval_{run}")), "--workers", "1"])?;
        spira_cmd(&[
            "explain", "--checkpoint", &ckpt, "--corpus", &corpus, "--window", "w0", "--class", "patient",
            "--out", &p(&format!("explain_{run}")), "--workers", "1",
        ])?;
        let wav = format!("{corpus}/wav/spk0000.wav");
        spira_cmd(&["resynth", "--input", &wav, "--out", &p(&format!("resynth_{run}")), "--workers", "1"])?;
        let mut probe = vec!["probe", "--corpus", &corpus, "--seeds", "0", "--workers", "1"];
        probe.extend(tiny);
        let probe_out = p(&format!("probe_{run}"));
        probe.extend(["--out", &probe_out]);
        spira_cmd(&probe)?;
    }
    for cmd in ["corpus", "train", "eval", "explain", "resynth", "probe"] {
        let a = hash_tree(&root.path().join(format!("{cmd}_a")));
        let b = hash_tree(&root.path().join(format!("{cmd}_b")));
        check(!a.is_empty(), || format!("{cmd}: no artifacts"))?;
        check(a == b, || format!("{cmd}: artifacts differ between runs"))?;
        compared.push(format!("{cmd} {}", a.len()));
    }
    Ok(format!("identical hashes ({} files), {:.0?}", compared.join(", "), t.elapsed()))
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let needs_corpus = [1, 8, 9].iter().any(|&n| wanted(n));
    let mut shared = needs_corpus.then(Shared::new);

    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {d}");
            }
        }
    };
    if wanted(2) {
        report(2, "shape fidelity", c2_shapes());
    }
    if wanted(3) {
        report(3, "dsp properties", c3_dsp());
    }
    if wanted(4) {
        report(4, "gradient correctness", c4_gradients());
    }
    if wanted(5) {
        report(5, "augmentation contracts", c5_augmentation());
    }
    if wanted(6) {
        report(6, "voting oracle", c6_voting());
    }
    if wanted(7) {
        report(7, "grad-cam oracle", c7_gradcam());
    }
    if wanted(10) {
        report(10, "cli reproducibility", c10_reproducibility());
    }
    if let Some(shared) = shared.as_mut() {
        if wanted(1) {
            report(1, "exp 1 accuracy on synthetic corpus", c1_headline_substitute(shared));
        }
        if wanted(9) {
            report(9, "pause attention", c9_pause_attention(shared));
        }
        if wanted(8) {
            report(8, "noise-injection bias probe", c8_bias_probe(shared));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
