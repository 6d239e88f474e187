//! Composite model inputs.
//!
//! The full layout stacks, top to bottom, the min-max normalized log-mel
//! (80 rows), a 20-row strip of constant scalars (age | F0-STD | sex across
//! 133 | 135 | 133 columns), and a 20-row F0 "bar code" where column `c`
//! repeats the normalized F0 of frame `c`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};

use crate::corpus::SpeakerRecord;
use crate::dsp::{MelSpectrogram, PitchTrack};
use crate::error::{Error, Result};

pub const FRAMES: usize = 401;
pub const SPEC_ROWS: usize = 80;
pub const STRIP_ROWS: usize = 20;
pub const META_ROWS: usize = 2 * STRIP_ROWS;
pub const AGE_COLS: usize = 133;
pub const F0STD_COLS: usize = 135;
pub const SEX_COLS: usize = 133;

pub const AGE_SCALE: f64 = 100.0;
pub const F0STD_SCALE_HZ: f64 = 100.0;
pub const F0_SCALE_HZ: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    SpecOnly,
    MetaOnly,
    Full,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::SpecOnly => "spec_only",
            Layout::MetaOnly => "meta_only",
            Layout::Full => "full",
        }
    }

    pub fn needs_spectrogram(self) -> bool {
        matches!(self, Layout::SpecOnly | Layout::Full)
    }

    pub fn needs_meta(self) -> bool {
        matches!(self, Layout::MetaOnly | Layout::Full)
    }

    /// Input shape for a spectrogram of `n_mels × frames`.
    pub fn shape(self, n_mels: usize, frames: usize) -> (usize, usize) {
        match self {
            Layout::SpecOnly => (n_mels, frames),
            Layout::MetaOnly => (META_ROWS, FRAMES),
            Layout::Full => (SPEC_ROWS + META_ROWS, FRAMES),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec_only" => Ok(Layout::SpecOnly),
            "meta_only" => Ok(Layout::MetaOnly),
            "full" => Ok(Layout::Full),
            other => Err(Error::UnknownToken {
                field: "layout",
                token: other.to_string(),
            }),
        }
    }
}

/// Normalized scalar inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaScalars {
    pub age_norm: f64,
    pub f0std_norm: f64,
    pub sex: f64,
    pub f0_norm: Vec<f64>,
}

pub fn normalize_meta(record: &SpeakerRecord, pitch: &PitchTrack) -> MetaScalars {
    MetaScalars {
        age_norm: (record.age as f64 / AGE_SCALE).clamp(0.0, 1.0),
        f0std_norm: (pitch.f0_std / F0STD_SCALE_HZ).clamp(0.0, 1.0),
        sex: record.sex.code() as f64,
        f0_norm: pitch
            .f0
            .iter()
            .map(|&f| (f / F0_SCALE_HZ).clamp(0.0, 1.0))
            .collect(),
    }
}

/// Range the spectrogram region was scaled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecNorm {
    pub min: f64,
    pub max: f64,
}

/// Region of a meta strip, for reporting attention per input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Spectrogram,
    Age,
    F0Std,
    Sex,
    F0,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Spectrogram,
        Region::Age,
        Region::F0Std,
        Region::Sex,
        Region::F0,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub layout: Layout,
    pub spec_norm: Option<SpecNorm>,
}

impl FeatureMatrix {
    /// Wraps values without checks (tests, mixed batches).
    pub fn raw(values: Array2<f64>, layout: Layout) -> Self {
        Self {
            values,
            layout,
            spec_norm: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Row range occupied by the spectrogram, if present.
    pub fn spec_rows(&self) -> Option<std::ops::Range<usize>> {
        match self.layout {
            Layout::SpecOnly => Some(0..self.values.nrows()),
            Layout::Full => Some(0..SPEC_ROWS),
            Layout::MetaOnly => None,
        }
    }

    /// `(rows, cols)` ranges of a region within this layout.
    pub fn region(&self, region: Region) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        region_bounds(self.layout, self.values.dim(), region)
    }

    pub fn region_view(&self, region: Region) -> Option<ArrayView2<'_, f64>> {
        self.region(region)
            .map(|(r, c)| self.values.slice(s![r, c]))
    }
}

/// Region bounds for a grid of `shape` laid out as `layout`.
pub fn region_bounds(
    layout: Layout,
    shape: (usize, usize),
    region: Region,
) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let meta_top = match layout {
        Layout::SpecOnly => {
            return (region == Region::Spectrogram).then(|| (0..shape.0, 0..shape.1));
        }
        Layout::MetaOnly => 0,
        Layout::Full => SPEC_ROWS,
    };
    let strip = meta_top..meta_top + STRIP_ROWS;
    let bar = meta_top + STRIP_ROWS..meta_top + META_ROWS;
    match region {
        Region::Spectrogram => (layout == Layout::Full).then(|| (0..SPEC_ROWS, 0..FRAMES)),
        Region::Age => Some((strip, 0..AGE_COLS)),
        Region::F0Std => Some((strip, AGE_COLS..AGE_COLS + F0STD_COLS)),
        Region::Sex => Some((strip, AGE_COLS + F0STD_COLS..FRAMES)),
        Region::F0 => Some((bar, 0..FRAMES)),
    }
}

fn min_max(values: &Array2<f64>) -> (Array2<f64>, SpecNorm) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = max - min;
    let scaled = if span > 0.0 {
        values.mapv(|v| (v - min) / span)
    } else {
        Array2::zeros(values.dim())
    };
    (scaled, SpecNorm { min, max })
}

fn meta_block(meta: &MetaScalars) -> Array2<f64> {
    let mut block = Array2::zeros((META_ROWS, FRAMES));
    block
        .slice_mut(s![0..STRIP_ROWS, 0..AGE_COLS])
        .fill(meta.age_norm);
    block
        .slice_mut(s![0..STRIP_ROWS, AGE_COLS..AGE_COLS + F0STD_COLS])
        .fill(meta.f0std_norm);
    block
        .slice_mut(s![0..STRIP_ROWS, AGE_COLS + F0STD_COLS..FRAMES])
        .fill(meta.sex);
    for (c, &f) in meta.f0_norm.iter().enumerate() {
        block.slice_mut(s![STRIP_ROWS..META_ROWS, c]).fill(f);
    }
    block
}

pub fn assemble(
    mel: Option<&MelSpectrogram>,
    pitch: Option<&PitchTrack>,
    record: Option<&SpeakerRecord>,
    layout: Layout,
) -> Result<FeatureMatrix> {
    let missing = |what: &str| Error::Config(format!("layout {layout} requires {what}"));
    let spec = if layout.needs_spectrogram() {
        let mel = mel.ok_or_else(|| missing("a spectrogram"))?;
        if layout == Layout::Full && mel.values.dim() != (SPEC_ROWS, FRAMES) {
            return Err(Error::shape(
                format!("({SPEC_ROWS}, {FRAMES}) spectrogram"),
                format!("{:?}", mel.values.dim()),
            ));
        }
        if !mel.values.iter().all(|v| v.is_finite()) {
            return Err(Error::OutOfRange("non-finite spectrogram entry".into()));
        }
        Some(min_max(&mel.values))
    } else {
        None
    };
    let meta = if layout.needs_meta() {
        let pitch = pitch.ok_or_else(|| missing("a pitch track"))?;
        let record = record.ok_or_else(|| missing("a speaker record"))?;
        if pitch.f0.len() != FRAMES {
            return Err(Error::shape(format!("{FRAMES} pitch frames"), pitch.f0.len()));
        }
        Some(meta_block(&normalize_meta(record, pitch)))
    } else {
        None
    };

    let (values, spec_norm) = match (spec, meta) {
        (Some((s, n)), None) => (s, Some(n)),
        (None, Some(m)) => (m, None),
        (Some((s, n)), Some(m)) => {
            let mut v = Array2::zeros((SPEC_ROWS + META_ROWS, FRAMES));
            v.slice_mut(s![0..SPEC_ROWS, ..]).assign(&s);
            v.slice_mut(s![SPEC_ROWS.., ..]).assign(&m);
            (v, Some(n))
        }
        (None, None) => unreachable!("every layout has a spectrogram or meta region"),
    };
    Ok(FeatureMatrix {
        values,
        layout,
        spec_norm,
    })
}
