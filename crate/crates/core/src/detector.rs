//! Linear-drift baseline detector.
//!
//! Sums spectrogram power along every straight line `c = start + d·r`
//! (columns wrap modulo `C`) for a uniform grid of drift rates `d`, then
//! scores the strongest line against the distribution of all line sums of
//! the same spectrogram: `(max - median) / MAD`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{DatasetError, Manifest};
use crate::sigsim::SignalClass;
use crate::spectro::{power_spectrogram, Plane, SpectroConfig, SpectroError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Spectro(#[from] SpectroError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    /// Largest drift searched, in bins per row.
    pub max_drift: f64,
    /// Number of drift hypotheses, evenly spaced over `[-max, max]`.
    pub steps: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        // One-bin end-to-end resolution over 384 rows.
        Self { max_drift: 0.5, steps: 385 }
    }
}

impl DriftConfig {
    pub fn drift_grid(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![0.0];
        }
        let span = 2.0 * self.max_drift;
        (0..self.steps)
            .map(|i| -self.max_drift + span * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftDetection {
    /// Noise-normalized sum along the best line.
    pub score: f64,
    /// Raw power sum along the best line.
    pub path_sum: f64,
    pub start_bin: usize,
    /// Bins per row.
    pub drift: f64,
    pub detected: bool,
    pub threshold: f64,
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Sums along every line for one drift rate, indexed by start bin.
fn line_sums(power: &Plane, drift: f64, sums: &mut [f64]) {
    let cols = power.cols;
    sums.iter_mut().for_each(|s| *s = 0.0);
    for r in 0..power.rows {
        let row = power.row(r);
        let offset = drift * r as f64;
        if (offset - offset.floor() - 0.5).abs() < 1e-6 {
            // Near a rounding boundary `start + offset` may round differently
            // from `start + round(offset)`; evaluate each start exactly.
            for (start, s) in sums.iter_mut().enumerate() {
                let c = ((start as f64 + offset).round() as i64).rem_euclid(cols as i64) as usize;
                *s += row[c];
            }
            continue;
        }
        let shift = (offset.round() as i64).rem_euclid(cols as i64) as usize;
        // sums[s] += row[(s + shift) % cols]
        let (head, tail) = row.split_at(shift);
        let (first, second) = sums.split_at_mut(cols - shift);
        first.iter_mut().zip(tail).for_each(|(s, p)| *s += p);
        second.iter_mut().zip(head).for_each(|(s, p)| *s += p);
    }
}

/// Exhaustive line search. Ties go to the smaller `|drift|`, then the smaller
/// start bin, then the smaller signed drift.
pub fn drift_search(power: &Plane, cfg: &DriftConfig) -> Result<DriftDetection, DetectorError> {
    if power.rows < 2 || power.cols < 2 || power.data.len() != power.rows * power.cols {
        return Err(DetectorError::Shape(format!("{}x{} spectrogram", power.rows, power.cols)));
    }
    if cfg.steps == 0 || !(cfg.max_drift >= 0.0) {
        return Err(DetectorError::InvalidArgument(format!("{cfg:?}")));
    }
    let grid = cfg.drift_grid();
    let cols = power.cols;
    let all: Vec<f64> = grid
        .par_iter()
        .flat_map_iter(|&d| {
            let mut sums = vec![0.0; cols];
            line_sums(power, d, &mut sums);
            sums
        })
        .collect();

    let mut best = (0usize, 0usize);
    let mut best_sum = f64::NEG_INFINITY;
    for (di, d) in grid.iter().enumerate() {
        for start in 0..cols {
            let s = all[di * cols + start];
            let better = s > best_sum
                || (s == best_sum && {
                    let bd = grid[best.0];
                    (d.abs(), start, *d) < (bd.abs(), best.1, bd)
                });
            if better {
                best_sum = s;
                best = (di, start);
            }
        }
    }

    let mut scratch = all;
    let median = median_in_place(&mut scratch);
    scratch.iter_mut().for_each(|v| *v = (*v - median).abs());
    let mut scale = median_in_place(&mut scratch);
    if scale == 0.0 {
        scale = scratch.iter().sum::<f64>() / scratch.len() as f64;
    }
    let score = if scale > 0.0 { ((best_sum - median) / scale).max(0.0) } else { 0.0 };

    Ok(DriftDetection {
        score,
        path_sum: best_sum,
        start_bin: best.1,
        drift: grid[best.0],
        detected: false,
        threshold: f64::INFINITY,
    })
}

/// Searches and applies a detection threshold (`score > threshold`).
pub fn detect(power: &Plane, cfg: &DriftConfig, threshold: f64) -> Result<DriftDetection, DetectorError> {
    let mut d = drift_search(power, cfg)?;
    d.threshold = threshold;
    d.detected = d.score > threshold;
    Ok(d)
}

/// Linear-interpolated empirical quantile of `scores` at level `1 - target_far`.
pub fn threshold_from_scores(scores: &[f64], target_far: f64) -> Result<f64, DetectorError> {
    if scores.is_empty() {
        return Err(DetectorError::InvalidArgument("no noise scores".into()));
    }
    if !(target_far > 0.0 && target_far < 1.0) {
        return Err(DetectorError::InvalidArgument(format!("false-alarm rate {target_far}")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (1.0 - target_far) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// Drift-search scores of every record in `manifest`, in record order.
pub fn score_manifest(
    manifest: &Manifest,
    spectro: &SpectroConfig,
    cfg: &DriftConfig,
) -> Result<Vec<f64>, DetectorError> {
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let iq = manifest.read_series(rec)?;
            let power = power_spectrogram(&iq, spectro)?;
            Ok(drift_search(&power, cfg)?.score)
        })
        .collect()
}

/// Threshold whose false-alarm rate on `noise` is `target_far`.
pub fn calibrate_threshold(
    noise: &Manifest,
    spectro: &SpectroConfig,
    cfg: &DriftConfig,
    target_far: f64,
) -> Result<f64, DetectorError> {
    if noise.is_empty() {
        return Err(DetectorError::InvalidArgument("empty noise manifest".into()));
    }
    if let Some(r) = noise.records.iter().find(|r| r.class != SignalClass::Noise) {
        return Err(DetectorError::InvalidArgument(format!("record {} is not noise", r.id)));
    }
    let scores = score_manifest(noise, spectro, cfg)?;
    threshold_from_scores(&scores, target_far)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_plane(rows: usize, cols: usize, start: f64, drift: f64) -> Plane {
        let mut p = Plane::zeros(rows, cols);
        for r in 0..rows {
            let c = ((start + drift * r as f64).round() as i64).rem_euclid(cols as i64) as usize;
            p.data[r * cols + c] = 1.0;
        }
        p
    }

    /// Direct evaluation of one line sum.
    fn brute_line(p: &Plane, start: usize, d: f64) -> f64 {
        (0..p.rows)
            .map(|r| {
                let c = ((start as f64 + d * r as f64).round() as i64).rem_euclid(p.cols as i64) as usize;
                p.get(r, c)
            })
            .sum()
    }

    #[test]
    fn zero_power_scores_zero_at_zero_drift() {
        let p = Plane::zeros(16, 32);
        let d = drift_search(&p, &DriftConfig { max_drift: 1.0, steps: 9 }).unwrap();
        assert_eq!(d.score, 0.0);
        assert_eq!(d.drift, 0.0);
        assert_eq!(d.start_bin, 0);
    }

    #[test]
    fn recovers_synthetic_line() {
        let p = line_plane(64, 128, 10.0, 0.5);
        let cfg = DriftConfig { max_drift: 1.0, steps: 81 };
        let d = drift_search(&p, &cfg).unwrap();
        let step = 2.0 * cfg.max_drift / (cfg.steps - 1) as f64;
        assert!((d.drift - 0.5).abs() <= step, "{d:?}");
        assert!((d.start_bin as i64 - 10).abs() <= 1);
        assert_eq!(d.path_sum, 64.0);
        assert!(d.score > 0.0);
    }

    #[test]
    fn line_sums_match_direct_evaluation() {
        let mut p = Plane::zeros(12, 20);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64;
        }
        let mut sums = vec![0.0; 20];
        for d in [-1.3, -0.5, 0.0, 0.25, 0.9] {
            line_sums(&p, d, &mut sums);
            for (s, v) in sums.iter().enumerate() {
                assert!((v - brute_line(&p, s, d)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shuffling_rows_destroys_line_advantage() {
        let p = line_plane(64, 128, 10.0, 0.5);
        let cfg = DriftConfig { max_drift: 1.0, steps: 81 };
        let before = drift_search(&p, &cfg).unwrap().score;
        // Fixed pseudo-random row order.
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by_key(|r| (r * 37 + 11) % 64);
        let mut shuffled = Plane::zeros(64, 128);
        for (dst, src) in order.iter().enumerate() {
            shuffled.data[dst * 128..(dst + 1) * 128].copy_from_slice(p.row(*src));
        }
        let after = drift_search(&shuffled, &cfg).unwrap().score;
        assert!(after <= 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(drift_search(&Plane::zeros(1, 8), &DriftConfig::default()).is_err());
        assert!(drift_search(&Plane::zeros(0, 0), &DriftConfig::default()).is_err());
        assert!(drift_search(&Plane::zeros(4, 8), &DriftConfig { max_drift: 1.0, steps: 0 }).is_err());
    }

    #[test]
    fn quantile_threshold_examples() {
        let scores: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        assert_eq!(threshold_from_scores(&scores, 0.5).unwrap(), 5.0);
        // Level 1 - 1/N sits between the two largest scores.
        let t = threshold_from_scores(&scores, 1.0 / 9.0).unwrap();
        assert!(t > 8.0 && t <= 9.0);
        // Level 1/N sits next to the smallest.
        let t = threshold_from_scores(&scores, 1.0 - 1.0 / 9.0).unwrap();
        assert!(t >= 1.0 && t < 2.0);
        assert!(threshold_from_scores(&[], 0.5).is_err());
        assert!(threshold_from_scores(&scores, 1.0).is_err());
        assert!(threshold_from_scores(&scores, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn adding_power_never_lowers_best_line_sum(
            seed in any::<u64>(), start in 0usize..32, drift in -1.0f64..1.0, gain in 0.0f64..5.0
        ) {
            let mut p = Plane::zeros(16, 32);
            let mut x = seed | 1;
            for v in p.data.iter_mut() {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                *v = (x % 1000) as f64 / 100.0;
            }
            let cfg = DriftConfig { max_drift: 1.0, steps: 17 };
            let before = drift_search(&p, &cfg).unwrap().path_sum;
            let line = line_plane(16, 32, start as f64, drift);
            let mut q = p.clone();
            q.data.iter_mut().zip(&line.data).for_each(|(a, b)| *a += gain * b);
            let after = drift_search(&q, &cfg).unwrap().path_sum;
            prop_assert!(after >= before);
        }
    }
}
