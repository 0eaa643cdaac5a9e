//! Labeled corpora on disk.
//!
//! Layout: `<out>/data/<id>.iq8` holds one series as interleaved signed
//! bytes `I0 Q0 I1 Q1 ...` with no header; `<out>/manifest.jsonl` holds one
//! JSON [`ManifestRecord`] per line and is the only index of the corpus.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, derive_seed, StreamPurpose};
use crate::sigsim::{
    simulate, AmplitudeOverride, IqSeries, PhaseMode, SignalClass, SimError, SimParams, NUM_CLASSES,
    SIM_LEN,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATA_DIR: &str = "data";

/// Per-class counts of the held-out test set, in class-code order.
pub const PAPER_TEST_COUNTS: [usize; NUM_CLASSES] = [385, 355, 348, 368, 385, 322, 332];

/// Fixed `A/13` amplitudes of the sweep sets.
pub const DEFAULT_SWEEP_AMPLITUDES: [f64; 14] =
    [0.008, 0.01, 0.02, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.12, 0.16, 0.2, 0.4];

const SWEEP_DOMAIN: u64 = 0x5357_4545_50;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt data file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Fold(usize),
    Sweep,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
            Split::Fold(i) => write!(f, "fold_{i}"),
            Split::Sweep => f.write_str("sweep"),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "sweep" => Ok(Split::Sweep),
            _ => s
                .strip_prefix("fold_")
                .and_then(|i| i.parse().ok())
                .map(Split::Fold)
                .ok_or_else(|| format!("unknown split '{s}'")),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub class: SignalClass,
    pub params: SimParams,
    /// Path of the data file relative to the corpus root.
    pub file: String,
    pub split: Split,
    pub sweep_amplitude: Option<f64>,
}

/// Records of one corpus plus the directory their files are relative to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self { root: root.into(), records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `<dir>/manifest.jsonl`.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Manifest { line: i + 1, message: e.to_string() })?;
            if rec.params.class != rec.class {
                return Err(DatasetError::Manifest {
                    line: i + 1,
                    message: format!("class {} disagrees with params.class", rec.class),
                });
            }
            records.push(rec);
        }
        Ok(Self { root: dir.to_path_buf(), records })
    }

    /// Writes `<root>/manifest.jsonl` atomically.
    pub fn save(&self) -> Result<(), DatasetError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            let mut w = BufWriter::new(f);
            for rec in &self.records {
                let line = serde_json::to_string(rec).expect("records always serialize");
                writeln!(w, "{line}").map_err(io_err(&tmp))?;
            }
            w.flush().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn path_of(&self, rec: &ManifestRecord) -> PathBuf {
        self.root.join(&rec.file)
    }

    pub fn read_series(&self, rec: &ManifestRecord) -> Result<IqSeries, DatasetError> {
        read_iq(&self.path_of(rec), rec.params.len)
    }

    /// Checks that every referenced file exists with the expected size.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for rec in &self.records {
            let path = self.path_of(rec);
            let meta = fs::metadata(&path).map_err(io_err(&path))?;
            if meta.len() != 2 * rec.params.len as u64 {
                return Err(DatasetError::Corrupt {
                    path,
                    message: format!("{} bytes, expected {}", meta.len(), 2 * rec.params.len),
                });
            }
        }
        Ok(())
    }

    pub fn filter(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            counts[r.class.code()] += 1;
        }
        counts
    }
}

pub fn encode_iq(x: &IqSeries) -> Vec<u8> {
    x.re.iter().zip(&x.im).flat_map(|(i, q)| [*i as u8, *q as u8]).collect()
}

pub fn decode_iq(bytes: &[u8]) -> IqSeries {
    let (re, im) = bytes.chunks_exact(2).map(|p| (p[0] as i8, p[1] as i8)).unzip();
    IqSeries { re, im }
}

pub fn write_iq(path: &Path, x: &IqSeries) -> Result<(), DatasetError> {
    fs::write(path, encode_iq(x)).map_err(io_err(path))
}

/// Reads a series of `len` samples; the file must be exactly `2·len` bytes.
pub fn read_iq(path: &Path, len: usize) -> Result<IqSeries, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != 2 * len {
        return Err(DatasetError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{} bytes, expected {}", bytes.len(), 2 * len),
        });
    }
    Ok(decode_iq(&bytes))
}

/// Reads a series of whatever length the file holds.
pub fn read_iq_any(path: &Path) -> Result<IqSeries, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.len() % 2 != 0 {
        return Err(DatasetError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{} bytes is not a whole number of samples", bytes.len()),
        });
    }
    Ok(decode_iq(&bytes))
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    /// Simulations per class, indexed by class code.
    pub counts: [usize; NUM_CLASSES],
    pub master_seed: u64,
    pub phase_mode: PhaseMode,
    pub out_dir: PathBuf,
    pub split: Split,
    pub amplitude: AmplitudeOverride,
}

impl CorpusSpec {
    pub fn uniform(per_class: usize, master_seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            counts: [per_class; NUM_CLASSES],
            master_seed,
            phase_mode: PhaseMode::Accumulate,
            out_dir: out_dir.into(),
            split: Split::Train,
            amplitude: AmplitudeOverride::Table,
        }
    }
}

struct Job {
    id: String,
    class: SignalClass,
    seed: u64,
    amplitude: AmplitudeOverride,
    sweep_amplitude: Option<f64>,
}

fn run_jobs(
    jobs: Vec<Job>,
    out_dir: &Path,
    split: Split,
    mode: PhaseMode,
) -> Result<Manifest, DatasetError> {
    let data_dir = out_dir.join(DATA_DIR);
    if !jobs.is_empty() {
        fs::create_dir_all(&data_dir).map_err(io_err(&data_dir))?;
    }
    let results: Vec<Result<ManifestRecord, DatasetError>> = jobs
        .par_iter()
        .map(|job| {
            let (params, iq) = simulate(job.class, job.seed, job.amplitude, mode)?;
            let file = format!("{DATA_DIR}/{}.iq8", job.id);
            write_iq(&out_dir.join(&file), &iq)?;
            Ok(ManifestRecord {
                id: job.id.clone(),
                class: job.class,
                params,
                file,
                split,
                sweep_amplitude: job.sweep_amplitude,
            })
        })
        .collect();

    if let Some(pos) = results.iter().position(|r| r.is_err()) {
        for job in &jobs {
            let _ = fs::remove_file(data_dir.join(format!("{}.iq8", job.id)));
        }
        let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
        return Err(results.into_iter().nth(pos).and_then(Result::err).expect("error present"));
    }
    let records = results.into_iter().map(|r| r.expect("checked above")).collect();
    let manifest = Manifest::new(out_dir, records);
    manifest.save()?;
    Ok(manifest)
}

/// Simulates `counts[class]` series per class and writes files plus manifest.
/// Item `i` of class `c` uses seed `derive_seed(master_seed, [c, i])`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Manifest, DatasetError> {
    let jobs = SignalClass::ALL
        .iter()
        .flat_map(|&class| {
            (0..spec.counts[class.code()]).map(move |i| Job {
                id: format!("{}_{:06}", class.name(), i),
                class,
                seed: derive_seed(spec.master_seed, &[class.code() as u64, i as u64]),
                amplitude: spec.amplitude,
                sweep_amplitude: None,
            })
        })
        .collect();
    run_jobs(jobs, &spec.out_dir, spec.split, spec.phase_mode)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub master_seed: u64,
    pub per_class: usize,
    pub amplitudes: Vec<f64>,
    pub phase_mode: PhaseMode,
    pub out_dir: PathBuf,
}

impl SweepSpec {
    pub fn with_defaults(master_seed: u64, per_class: usize, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            master_seed,
            per_class,
            amplitudes: DEFAULT_SWEEP_AMPLITUDES.to_vec(),
            phase_mode: PhaseMode::Accumulate,
            out_dir: out_dir.into(),
        }
    }
}

/// Fixed-amplitude sets: for each amplitude `a`, `per_class` series per class
/// with `A0 = 13·a` (noise stays at zero amplitude).
pub fn generate_sweep(spec: &SweepSpec) -> Result<Manifest, DatasetError> {
    if spec.amplitudes.is_empty() {
        return Err(DatasetError::InvalidArgument("empty amplitude list".into()));
    }
    let mut jobs = Vec::new();
    for (ai, &a) in spec.amplitudes.iter().enumerate() {
        for class in SignalClass::ALL {
            for i in 0..spec.per_class {
                jobs.push(Job {
                    id: format!("sweep{ai:02}_{}_{i:05}", class.name()),
                    class,
                    seed: derive_seed(
                        spec.master_seed,
                        &[SWEEP_DOMAIN, ai as u64, class.code() as u64, i as u64],
                    ),
                    amplitude: AmplitudeOverride::Fixed(a),
                    sweep_amplitude: Some(a),
                });
            }
        }
    }
    run_jobs(jobs, &spec.out_dir, Split::Sweep, spec.phase_mode)
}

/// Assigns every record to one of `k` folds, stratified by class.
///
/// Within each class the records are shuffled and dealt round-robin, so
/// per-class fold sizes differ by at most one. The dealing offset carries
/// over from class to class to balance the fold totals.
pub fn kfold_split(manifest: &Manifest, k: usize, seed: u64) -> Result<Manifest, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidArgument(format!("k = {k}, need at least 2")));
    }
    let mut out = manifest.clone();
    let mut offset = 0;
    for class in SignalClass::ALL {
        let mut idx: Vec<usize> = (0..out.records.len())
            .filter(|&i| out.records[i].class == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(DatasetError::InvalidArgument(format!(
                "{} {class} records cannot fill {k} folds",
                idx.len()
            )));
        }
        let mut rng = rng::stream(derive_seed(seed, &[class.code() as u64]), StreamPurpose::Shuffle);
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            out.records[i].split = Split::Fold((pos + offset) % k);
        }
        offset = (offset + idx.len()) % k;
    }
    Ok(out)
}

/// Expected byte length of one series file.
pub const fn file_len() -> usize {
    2 * SIM_LEN
}
