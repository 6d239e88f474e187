//! Speaker manifests, stratified splits, and the synthetic corpus generator.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synth::{
    generate_corpus, render_noise, render_speaker, ClassProfile, GenProfile, GeneratedCorpus,
    NoiseChannel, SpeakerRender, NOISE_DIR, PAUSES_FILE, PROFILE_FILE, WAV_DIR,
};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,label,age,sex,path,split";

/// Deterministic 64-bit seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Patient,
    Control,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Patient, Label::Control];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Patient => "patient",
            Label::Control => "control",
        }
    }

    /// One-hot `(p_patient, p_control)`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Patient => [1.0, 0.0],
            Label::Control => [0.0, 1.0],
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Patient => Label::Control,
            Label::Control => Label::Patient,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patient" => Ok(Label::Patient),
            "control" => Ok(Label::Control),
            other => Err(Error::UnknownToken {
                field: "label",
                token: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sex {
    Male = 0,
    Female = 1,
}

impl Sex {
    pub fn code(self) -> u8 {
        self as u8
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(Sex::Male),
            "1" => Ok(Sex::Female),
            other => Err(Error::UnknownToken {
                field: "sex",
                token: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownToken {
                field: "split",
                token: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRecord {
    pub id: String,
    pub label: Label,
    pub age: u32,
    pub sex: Sex,
    /// Absolute, or relative to the manifest's directory.
    pub clip_path: PathBuf,
}

impl SpeakerRecord {
    pub fn validate(&self) -> Result<()> {
        if !(18..=100).contains(&self.age) {
            return Err(Error::OutOfRange(format!(
                "age {} of `{}` outside [18, 100]",
                self.age, self.id
            )));
        }
        if self.id.is_empty() || self.id.contains(',') {
            return Err(Error::Manifest(format!("invalid speaker id `{}`", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<SpeakerRecord>,
    pub split: BTreeMap<String, Split>,
    /// Directory relative clip paths resolve against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(records: Vec<SpeakerRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            split: BTreeMap::new(),
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SpeakerRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn clip_path(&self, record: &SpeakerRecord) -> PathBuf {
        if record.clip_path.is_absolute() {
            record.clip_path.clone()
        } else {
            self.root.join(&record.clip_path)
        }
    }

    /// Records of one split, in manifest order.
    pub fn records_in(&self, split: Split) -> Vec<&SpeakerRecord> {
        self.records
            .iter()
            .filter(|r| self.split.get(&r.id) == Some(&split))
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.split.values().filter(|&&v| v == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let split = self.split.get(&r.id).map(|s| s.as_str()).unwrap_or("");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id,
                r.label,
                r.age,
                r.sex.code(),
                r.clip_path.to_string_lossy(),
                split
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest CSV; every referenced clip must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Manifest(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "expected header `{MANIFEST_HEADER}`, found `{header}`"
        )));
    }

    let mut records = Vec::new();
    let mut split = BTreeMap::new();
    let mut seen = HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
        if row.len() != 6 {
            return Err(Error::Manifest(format!(
                "row {}: expected 6 fields, found {}",
                line + 2,
                row.len()
            )));
        }
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let age = row[2]
            .parse::<u32>()
            .map_err(|_| Error::Manifest(format!("row {}: bad age `{}`", line + 2, &row[2])))?;
        let record = SpeakerRecord {
            id: id.clone(),
            label: row[1].parse()?,
            age,
            sex: row[3].parse()?,
            clip_path: PathBuf::from(&row[4]),
        };
        record.validate()?;
        if !row[5].is_empty() {
            split.insert(id, row[5].parse()?);
        }
        records.push(record);
    }

    let manifest = CorpusManifest {
        records,
        split,
        root,
    };
    for r in &manifest.records {
        let p = manifest.clip_path(r);
        if !p.is_file() {
            return Err(Error::DanglingClip {
                id: r.id.clone(),
                path: p,
            });
        }
    }
    Ok(manifest)
}

/// Class-stratified split. Each split's patient count is within one of its
/// proportional share; records beyond `n_train + n_val + n_test` are left
/// unassigned.
pub fn split_manifest(
    manifest: &CorpusManifest,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    let total = manifest.len();
    let requested = n_train + n_val + n_test;
    if requested > total {
        return Err(Error::InsufficientRecords {
            requested,
            available: total,
        });
    }
    let mut rng = rng_for(seed, "split");
    let mut pools: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        pools.entry(r.label).or_default().push(r.id.as_str());
    }
    for ids in pools.values_mut() {
        ids.shuffle(&mut rng);
    }
    let n_patients = pools.get(&Label::Patient).map_or(0, Vec::len);
    let n_controls = total - n_patients;

    let sizes = [n_train, n_val, n_test];
    let patients = apportion(&sizes, n_patients, total);
    let mut out = manifest.clone();
    out.split.clear();
    let mut cursor: BTreeMap<Label, usize> = BTreeMap::new();
    for ((size, n_pat), which) in sizes
        .iter()
        .zip(&patients)
        .zip([Split::Train, Split::Val, Split::Test])
    {
        let n_ctrl = size - n_pat;
        for (label, count) in [(Label::Patient, *n_pat), (Label::Control, n_ctrl)] {
            let start = *cursor.get(&label).unwrap_or(&0);
            let pool = pools.get(&label).map(Vec::as_slice).unwrap_or(&[]);
            let ids = pool.get(start..start + count).ok_or(Error::InsufficientRecords {
                requested: start + count,
                available: pool.len(),
            })?;
            for id in ids {
                out.split.insert(id.to_string(), which);
            }
            cursor.insert(label, start + count);
        }
    }
    debug_assert!(cursor.get(&Label::Control).copied().unwrap_or(0) <= n_controls);
    Ok(out)
}

/// Largest-remainder apportionment of patients across splits so each split
/// gets `size * n_patients / total` rounded, with the overall patient total
/// preserved and no split exceeding its size or the remaining controls.
fn apportion(sizes: &[usize], n_patients: usize, total: usize) -> Vec<usize> {
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let ideal: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * n_patients as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let target = ideal.iter().sum::<f64>().round() as usize;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = alloc.iter().sum();
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if assigned >= target {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            assigned += 1;
        }
    }
    // Keep control demand within supply.
    let n_controls = total - n_patients;
    let control_demand = |alloc: &[usize]| -> usize {
        sizes.iter().zip(alloc).map(|(s, a)| s - a).sum()
    };
    while control_demand(&alloc) > n_controls {
        let Some(i) = (0..sizes.len()).find(|&i| alloc[i] < sizes[i]) else {
            break;
        };
        alloc[i] += 1;
    }
    alloc
}
