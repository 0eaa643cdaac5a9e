//! Classification metrics and amplitude-sweep reports.
//!
//! Class order is the [`SignalClass`] code order everywhere. Metrics with a
//! zero denominator are defined as 0.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest};
use crate::sigsim::{SignalClass, NUM_CLASSES};
use crate::spectro::{FeaturePipeline, SpectroError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("record {0} has no sweep amplitude")]
    MissingAmplitude(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Spectro(#[from] SpectroError),
}

/// Probability of each class for one input.
pub type ClassProbs = [f64; NUM_CLASSES];

/// Anything that maps feature tensors to class probabilities.
pub trait ProbabilisticClassifier: Sync {
    /// Values per input (`channels·H·W`).
    fn input_len(&self) -> usize;
    /// `inputs` holds `n` inputs back to back.
    fn predict_proba(&self, inputs: &[f32], n: usize) -> Vec<ClassProbs>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    /// `counts[actual][predicted]`.
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        self.counts[actual].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|row| row[predicted]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual");
        for c in SignalClass::ALL {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for c in SignalClass::ALL {
            s.push_str(c.name());
            for v in self.counts[c.code()] {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(pred: &[SignalClass], actual: &[SignalClass]) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch(pred.len(), actual.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, a) in pred.iter().zip(actual) {
        cm.counts[a.code()][p.code()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub n: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub classes: [ClassMetrics; NUM_CLASSES],
    /// Unweighted mean of the per-class F1 scores.
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn report(cm: &ConfusionMatrix) -> ClassReport {
    let mut classes = [ClassMetrics::default(); NUM_CLASSES];
    for (c, m) in classes.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        m.n = cm.row_sum(c);
        m.precision = ratio(tp, cm.col_sum(c));
        m.recall = ratio(tp, m.n);
        m.f1 = f1_score(m.precision, m.recall);
    }
    let macro_f1 = classes.iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64;
    ClassReport { classes, macro_f1, accuracy: ratio(cm.trace(), cm.total()) }
}

impl ClassReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,n,precision,recall,f1\n");
        for c in SignalClass::ALL {
            let m = &self.classes[c.code()];
            writeln!(s, "{c},{},{},{},{}", m.n, m.precision, m.recall, m.f1).unwrap();
        }
        writeln!(s, "macro_f1,,,,{}", self.macro_f1).unwrap();
        writeln!(s, "accuracy,,,,{}", self.accuracy).unwrap();
        s
    }
}

impl fmt::Display for ClassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>6} {:>9} {:>7} {:>7}", "class", "N", "precision", "recall", "F1")?;
        for c in SignalClass::ALL {
            let m = &self.classes[c.code()];
            writeln!(
                f,
                "{:<32} {:>6} {:>9.3} {:>7.3} {:>7.3}",
                c.name(),
                m.n,
                m.precision,
                m.recall,
                m.f1
            )?;
        }
        writeln!(f, "macro F1 {:.4}   accuracy {:.4}", self.macro_f1, self.accuracy)
    }
}

pub fn argmax(p: &ClassProbs) -> SignalClass {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if p[i] > p[best] {
            best = i;
        }
    }
    SignalClass::ALL[best]
}

/// Mean multinomial cross-entropy `-ln p[actual]`.
pub fn cross_entropy(probs: &[ClassProbs], actual: &[SignalClass]) -> Result<f64, EvalError> {
    if probs.len() != actual.len() {
        return Err(EvalError::LengthMismatch(probs.len(), actual.len()));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(actual)
        .map(|(p, a)| -p[a.code()].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Fixed `A/13` of this set.
    pub amplitude: f64,
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: [f64; NUM_CLASSES],
    /// Fraction of non-noise inputs predicted as noise.
    pub noise_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Strictly increasing in amplitude.
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// CSV with columns `amplitude,loss,accuracy,f1_<class>...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("amplitude,loss,accuracy");
        for c in SignalClass::ALL {
            write!(s, ",f1_{c}").unwrap();
        }
        s.push('\n');
        for p in &self.points {
            write!(s, "{},{},{}", p.amplitude, p.loss, p.accuracy).unwrap();
            for v in p.f1 {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Smallest amplitude at which the class's F1 exceeds `level`.
    pub fn f1_onset(&self, class: SignalClass, level: f64) -> Option<f64> {
        self.points.iter().find(|p| p.f1[class.code()] > level).map(|p| p.amplitude)
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.amplitude).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.accuracy).collect()
    }
}

/// Groups predictions by amplitude and scores each group.
pub fn sweep_from_predictions(
    amplitudes: &[f64],
    probs: &[ClassProbs],
    actual: &[SignalClass],
) -> Result<SweepReport, EvalError> {
    if amplitudes.len() != probs.len() {
        return Err(EvalError::LengthMismatch(probs.len(), amplitudes.len()));
    }
    if probs.len() != actual.len() {
        return Err(EvalError::LengthMismatch(probs.len(), actual.len()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, a) in amplitudes.iter().enumerate() {
        if !a.is_finite() || *a < 0.0 {
            return Err(EvalError::Invalid(format!("amplitude {a}")));
        }
        // Non-negative floats order like their bit patterns.
        groups.entry(a.to_bits()).or_default().push(i);
    }
    let mut points = Vec::with_capacity(groups.len());
    for (bits, idx) in groups {
        let p: Vec<ClassProbs> = idx.iter().map(|&i| probs[i]).collect();
        let a: Vec<SignalClass> = idx.iter().map(|&i| actual[i]).collect();
        let pred: Vec<SignalClass> = p.iter().map(argmax).collect();
        let rep = report(&confusion(&pred, &a)?);
        let signal: Vec<usize> = (0..a.len()).filter(|&i| a[i] != SignalClass::Noise).collect();
        let as_noise = signal.iter().filter(|&&i| pred[i] == SignalClass::Noise).count();
        let mut f1 = [0.0; NUM_CLASSES];
        for (dst, m) in f1.iter_mut().zip(rep.classes.iter()) {
            *dst = m.f1;
        }
        points.push(SweepPoint {
            amplitude: f64::from_bits(bits),
            count: idx.len(),
            loss: cross_entropy(&p, &a)?,
            accuracy: rep.accuracy,
            f1,
            noise_fraction: ratio(as_noise as u64, signal.len() as u64),
        });
    }
    Ok(SweepReport { points })
}

const PREDICT_CHUNK: usize = 64;

/// Class probabilities for every record, in record order.
pub fn predict_manifest<M: ProbabilisticClassifier + ?Sized>(
    model: &M,
    manifest: &Manifest,
    pipeline: &FeaturePipeline,
) -> Result<Vec<ClassProbs>, EvalError> {
    if model.input_len() != pipeline.input_len() {
        return Err(EvalError::Invalid(format!(
            "model expects {} values per input, pipeline yields {}",
            model.input_len(),
            pipeline.input_len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for chunk in manifest.records.chunks(PREDICT_CHUNK) {
        let feats: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|rec| -> Result<Vec<f32>, EvalError> {
                let iq = manifest.read_series(rec)?;
                Ok(pipeline.features(&iq)?)
            })
            .collect::<Result<_, _>>()?;
        let flat: Vec<f32> = feats.concat();
        out.extend(model.predict_proba(&flat, chunk.len()));
    }
    Ok(out)
}

/// Scores a model on a sweep corpus; every record needs `sweep_amplitude`.
pub fn sweep_eval<M: ProbabilisticClassifier + ?Sized>(
    model: &M,
    manifest: &Manifest,
    pipeline: &FeaturePipeline,
) -> Result<SweepReport, EvalError> {
    let amplitudes: Vec<f64> = manifest
        .records
        .iter()
        .map(|r| r.sweep_amplitude.ok_or_else(|| EvalError::MissingAmplitude(r.id.clone())))
        .collect::<Result<_, _>>()?;
    let probs = predict_manifest(model, manifest, pipeline)?;
    let actual: Vec<SignalClass> = manifest.records.iter().map(|r| r.class).collect();
    sweep_from_predictions(&amplitudes, &probs, &actual)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Area under the ROC curve: probability a positive outscores a negative,
/// ties counted as one half.
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut all: Vec<f64> = positive.to_vec();
    all.extend_from_slice(negative);
    let ranks = average_ranks(&all);
    let pos_rank: f64 = ranks[..positive.len()].iter().sum();
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    (pos_rank - np * (np + 1.0) / 2.0) / (np * nn)
}
