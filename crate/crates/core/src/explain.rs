//! Grad-CAM heat maps, heat-masked spectrograms and their resynthesis.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Axis};

use crate::audio_io::AudioClip;
use crate::corpus::Label;
use crate::dsp::{inverse_log_mel, write_matrix_pgm, MelSpectrogram, PgmScaling};
use crate::error::{Error, Result};
use crate::features::{region_bounds, FeatureMatrix, Layout, Region};
use crate::model::{backward, forward, ModelState, Pass};

/// Peak level of resynthesized audio.
pub const SONIFY_PEAK: f64 = 0.9;

/// Which class the explanation argues for; the patient class follows the
/// logit, the control class its negation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSign {
    Patient,
    Control,
}

impl ClassSign {
    pub fn sign(self) -> f64 {
        match self {
            ClassSign::Patient => 1.0,
            ClassSign::Control => -1.0,
        }
    }

    pub fn of(label: Label) -> Self {
        match label {
            Label::Patient => ClassSign::Patient,
            Label::Control => ClassSign::Control,
        }
    }
}

impl fmt::Display for ClassSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassSign::Patient => "patient",
            ClassSign::Control => "control",
        })
    }
}

impl FromStr for ClassSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<Label>().map(Self::of)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// Same grid as the model input, in `[0, 1]`.
    pub values: Array2<f64>,
    pub target_layer: String,
    pub class_sign: ClassSign,
    /// The raw map was zero everywhere.
    pub all_zero: bool,
}

impl HeatMap {
    /// Mean attention over a layout region.
    pub fn region_mean(&self, layout: Layout, region: Region) -> Option<f64> {
        let (r, c) = region_bounds(layout, self.values.dim(), region)?;
        self.values.slice(s![r, c]).mean()
    }
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_resize(m: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (h, w) = m.dim();
    let coord = |d: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let cs: Vec<_> = (0..cols).map(|c| coord(c, cols, w)).collect();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (r0, r1, fr) = coord(r, rows, h);
        let (c0, c1, fc) = cs[c];
        let top = m[[r0, c0]] * (1.0 - fc) + m[[r0, c1]] * fc;
        let bottom = m[[r1, c0]] * (1.0 - fc) + m[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Divides by the maximum; returns whether the map was all zero.
pub fn normalize_max(m: &mut Array2<f64>) -> bool {
    let max = m.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        m.mapv_inplace(|v| v / max);
        false
    } else {
        m.fill(0.0);
        true
    }
}

/// Gradient-weighted class activation map of `target_layer`.
pub fn grad_cam(state: &ModelState, x: &FeatureMatrix, target_layer: &str, class: ClassSign) -> Result<HeatMap> {
    if !state.layer_names().iter().any(|n| n == target_layer) {
        return Err(Error::UnknownLayer(target_layer.to_string()));
    }
    let tape = forward(state, x, Pass::Eval)?;
    let grads = backward(state, &tape, &[class.sign()])?;
    let a = tape
        .feature_map(target_layer)
        .ok_or_else(|| Error::UnknownLayer(target_layer.to_string()))?
        .index_axis(Axis(0), 0);
    let g = grads.feature_maps[target_layer].index_axis(Axis(0), 0);
    let (k, h, w) = a.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for ch in 0..k {
        let alpha = g.index_axis(Axis(0), ch).mean().unwrap_or(0.0);
        if alpha != 0.0 {
            cam.scaled_add(alpha, &a.index_axis(Axis(0), ch));
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let (rows, cols) = x.shape();
    let mut up = bilinear_resize(&cam, rows, cols);
    let all_zero = normalize_max(&mut up);
    Ok(HeatMap {
        values: up,
        target_layer: target_layer.to_string(),
        class_sign: class,
        all_zero,
    })
}

/// Lower end of the range used to normalize a log-mel: the log floor, so a
/// zero heat value maps to silence.
fn mel_range(mel: &MelSpectrogram) -> (f64, f64) {
    let lo = mel.config.log_floor.ln();
    let hi = mel.values.iter().cloned().fold(lo, f64::max);
    (lo, hi)
}

/// Hadamard product of `heat` with the log-mel scaled to `[0, 1]` over
/// `[ln floor, max]`, mapped back to log-mel units.
pub fn apply_heatmap(mel: &MelSpectrogram, heat: &Array2<f64>) -> Result<MelSpectrogram> {
    if mel.values.dim() != heat.dim() {
        return Err(Error::shape(
            format!("{:?}", mel.values.dim()),
            format!("{:?}", heat.dim()),
        ));
    }
    let (lo, hi) = mel_range(mel);
    let span = hi - lo;
    let mut out = mel.clone();
    ndarray::Zip::from(&mut out.values).and(heat).for_each(|v, &h| {
        let n = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        *v = lo + n * h * span;
    });
    Ok(out)
}

/// The spectrogram rows of a heat map laid out like `layout`.
pub fn spectrogram_region(heat: &HeatMap, layout: Layout) -> Result<Array2<f64>> {
    let (r, c) = region_bounds(layout, heat.values.dim(), Region::Spectrogram)
        .ok_or_else(|| Error::Config(format!("layout {layout} has no spectrogram region")))?;
    Ok(heat.values.slice(s![r, c]).to_owned())
}

/// Resynthesizes `modified` with the window's original phase. The gain is the
/// one that brings the unmodified `reference` resynthesis to [`SONIFY_PEAK`],
/// so masked regions stay quiet instead of being re-amplified.
pub fn sonify(modified: &MelSpectrogram, phase: &Array2<f64>, reference: &MelSpectrogram) -> Result<AudioClip> {
    let config = modified.config;
    let base = inverse_log_mel(reference, phase, &config)?;
    let peak = base.peak();
    let gain = if peak > 0.0 { SONIFY_PEAK / peak } else { 0.0 };
    let mut out = inverse_log_mel(modified, phase, &config)?;
    out.samples.iter_mut().for_each(|v| *v = (*v * gain).clamp(-1.0, 1.0));
    Ok(out)
}

/// Paths written by [`export_panel`].
#[derive(Debug, Clone)]
pub struct PanelFiles {
    pub original: PathBuf,
    pub heat: PathBuf,
    pub modified: PathBuf,
    pub sidecar: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Three stacked views as PGM images (original, heat map, modified) plus a
/// text sidecar recording the grey-level scaling of each.
pub fn export_panel(
    original: &MelSpectrogram,
    heat: &Array2<f64>,
    modified: &MelSpectrogram,
    prefix: impl AsRef<Path>,
) -> Result<PanelFiles> {
    let prefix = prefix.as_ref();
    if original.values.dim() != heat.dim() || modified.values.dim() != heat.dim() {
        return Err(Error::shape(
            format!("{:?}", original.values.dim()),
            format!("{:?} / {:?}", heat.dim(), modified.values.dim()),
        ));
    }
    let files = PanelFiles {
        original: with_suffix(prefix, "_original.pgm"),
        heat: with_suffix(prefix, "_heatmap.pgm"),
        modified: with_suffix(prefix, "_modified.pgm"),
        sidecar: with_suffix(prefix, "_scaling.txt"),
    };
    // Low mel bands at the bottom of the image.
    let flip = |m: &Array2<f64>| m.slice(s![..;-1, ..]).to_owned();
    let spec_scale = PgmScaling::of(&original.values);
    write_matrix_pgm(&flip(&original.values), Some(spec_scale), &files.original)?;
    let heat_scale = PgmScaling { min: 0.0, max: 1.0 };
    write_matrix_pgm(&flip(heat), Some(heat_scale), &files.heat)?;
    write_matrix_pgm(&flip(&modified.values), Some(spec_scale), &files.modified)?;
    let sidecar = format!(
        "original.min={:.10e}\noriginal.max={:.10e}\nheatmap.min={}\nheatmap.max={}\nmodified.min={:.10e}\nmodified.max={:.10e}\n",
        spec_scale.min, spec_scale.max, heat_scale.min, heat_scale.max, spec_scale.min, spec_scale.max
    );
    std::fs::write(&files.sidecar, sidecar).map_err(|e| Error::io(&files.sidecar, e))?;
    Ok(files)
}

pub const ATTENTION_HEADER: &str =
    "window_id,predicted_class,mean_attn_spec,mean_attn_age,mean_attn_f0std,mean_attn_sex,mean_attn_f0";

/// One attention-report line; regions absent from the layout are left empty.
pub fn attention_row(window_id: &str, predicted: Label, heat: &HeatMap, layout: Layout) -> String {
    let mut cols = vec![window_id.to_string(), predicted.to_string()];
    for region in Region::ALL {
        cols.push(
            heat.region_mean(layout, region)
                .map_or(String::new(), |v| format!("{v:.6}")),
        );
    }
    cols.join(",")
}
