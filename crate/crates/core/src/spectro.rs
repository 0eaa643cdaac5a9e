//! Spectrogram and phase feature images.
//!
//! A series of `R·C` samples is reshaped row-major into `R` rows of `C`
//! samples. Each row is windowed, transformed with a `C`-point DFT and
//! optionally rotated so that frequency zero sits at column `C/2`. The two
//! feature channels are `ln(|X|² + ε)` and `arg X`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::sigsim::{FloatIq, IqSeries};

#[derive(Debug, Error)]
pub enum SpectroError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann window, `0.5·(1 - cos(2πn/C))`.
    Hanning,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectroConfig {
    pub rows: usize,
    pub cols: usize,
    /// Floor added to the power before the logarithm.
    pub epsilon: f64,
    pub window: Window,
    pub fftshift: bool,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        Self {
            rows: 384,
            cols: 512,
            epsilon: 1e-12,
            window: Window::Hanning,
            fftshift: true,
        }
    }
}

impl SpectroConfig {
    pub fn validate(&self) -> Result<(), SpectroError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(SpectroError::Config(format!("{}x{} grid", self.rows, self.cols)));
        }
        if !(self.epsilon > 0.0) {
            return Err(SpectroError::Config(format!("epsilon {}", self.epsilon)));
        }
        Ok(())
    }
}

/// A dense row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SpectroError> {
        if data.len() != rows * cols {
            return Err(SpectroError::Shape(format!(
                "{} values for a {rows}x{cols} plane",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }
}

/// Two-channel feature image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub log_power: Plane,
    pub phase: Plane,
}

impl FeatureImage {
    pub fn rows(&self) -> usize {
        self.log_power.rows
    }

    pub fn cols(&self) -> usize {
        self.log_power.cols
    }
}

/// Anything that can be read as a sequence of complex samples.
pub trait ComplexSamples {
    fn sample_count(&self) -> usize;
    fn sample(&self, i: usize) -> Complex<f64>;
}

impl ComplexSamples for IqSeries {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Complex<f64> {
        Complex::new(self.re[i] as f64, self.im[i] as f64)
    }
}

impl ComplexSamples for FloatIq {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Complex<f64> {
        Complex::new(self.re[i], self.im[i])
    }
}

impl ComplexSamples for [Complex<f64>] {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn sample(&self, i: usize) -> Complex<f64> {
        self[i]
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Windowed, transformed and (optionally) shifted rows, row-major `R×C`.
pub fn spectrum<X: ComplexSamples + ?Sized>(
    x: &X,
    cfg: &SpectroConfig,
) -> Result<Vec<Complex<f64>>, SpectroError> {
    cfg.validate()?;
    let (rows, cols) = (cfg.rows, cfg.cols);
    if x.sample_count() != rows * cols {
        return Err(SpectroError::Shape(format!(
            "{} samples cannot be reshaped to {rows}x{cols}",
            x.sample_count()
        )));
    }
    let window = match cfg.window {
        Window::Hanning => Some(hann_window(cols)),
        Window::None => None,
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cols);
    let mut out: Vec<Complex<f64>> = (0..rows * cols).map(|i| x.sample(i)).collect();

    out.par_chunks_mut(cols).for_each_init(
        || (vec![Complex::default(); fft.get_inplace_scratch_len()], vec![Complex::default(); cols]),
        |(scratch, tmp), row| {
            if let Some(w) = &window {
                row.iter_mut().zip(w).for_each(|(v, w)| *v *= *w);
            }
            fft.process_with_scratch(row, scratch);
            if cfg.fftshift {
                let half = cols / 2;
                for (j, t) in tmp.iter_mut().enumerate() {
                    *t = row[(j + cols - half) % cols];
                }
                row.copy_from_slice(tmp);
            }
        },
    );
    Ok(out)
}

/// `|X|²` per row and bin.
pub fn power_spectrogram<X: ComplexSamples + ?Sized>(
    x: &X,
    cfg: &SpectroConfig,
) -> Result<Plane, SpectroError> {
    let spec = spectrum(x, cfg)?;
    Ok(Plane { rows: cfg.rows, cols: cfg.cols, data: spec.iter().map(|z| z.norm_sqr()).collect() })
}

#[inline]
fn principal_phase(z: Complex<f64>) -> f64 {
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

pub fn make_features<X: ComplexSamples + ?Sized>(
    x: &X,
    cfg: &SpectroConfig,
) -> Result<FeatureImage, SpectroError> {
    let spec = spectrum(x, cfg)?;
    let log_power = spec.iter().map(|z| (z.norm_sqr() + cfg.epsilon).ln()).collect();
    let phase = spec.iter().map(|z| principal_phase(*z)).collect();
    Ok(FeatureImage {
        log_power: Plane { rows: cfg.rows, cols: cfg.cols, data: log_power },
        phase: Plane { rows: cfg.rows, cols: cfg.cols, data: phase },
    })
}

const STD_FLOOR: f64 = 1e-6;

fn standardize(p: &Plane) -> Plane {
    let n = p.data.len() as f64;
    let mean = p.data.iter().sum::<f64>() / n;
    let var = p.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    p.map(|v| (v - mean) / std)
}

/// Zero-mean, unit-variance scaling of each channel.
pub fn normalize(img: &FeatureImage) -> FeatureImage {
    FeatureImage { log_power: standardize(&img.log_power), phase: standardize(&img.phase) }
}

fn pool(p: &Plane, h: usize, w: usize) -> Plane {
    let (bh, bw) = (p.rows / h, p.cols / w);
    let scale = 1.0 / (bh * bw) as f64;
    let mut out = Plane::zeros(h, w);
    for r in 0..p.rows {
        let src = p.row(r);
        let dst = &mut out.data[(r / bh) * w..(r / bh + 1) * w];
        for (c, v) in src.iter().enumerate() {
            dst[c / bw] += v;
        }
    }
    out.data.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Block-mean pooling to `h×w`.
pub fn downsample(img: &FeatureImage, h: usize, w: usize) -> Result<FeatureImage, SpectroError> {
    let (r, c) = (img.rows(), img.cols());
    if h == 0 || w == 0 || h > r || w > c || r % h != 0 || c % w != 0 {
        return Err(SpectroError::Shape(format!("cannot pool {r}x{c} to {h}x{w}")));
    }
    Ok(FeatureImage { log_power: pool(&img.log_power, h, w), phase: pool(&img.phase, h, w) })
}

/// Encodes a plane as a binary 8-bit PGM with min-max scaling (white = max).
pub fn encode_pgm(p: &Plane) -> Vec<u8> {
    let (lo, hi) = p
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", p.cols, p.rows).into_bytes();
    out.extend(p.data.iter().map(|v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, p: &Plane) -> Result<(), SpectroError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_pgm(p))?;
    f.flush()?;
    Ok(())
}

/// Full path from a time series to classifier input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePipeline {
    pub spectro: SpectroConfig,
    pub height: usize,
    pub width: usize,
    pub include_phase: bool,
}

impl Default for FeaturePipeline {
    fn default() -> Self {
        Self { spectro: SpectroConfig::default(), height: 96, width: 128, include_phase: true }
    }
}

impl FeaturePipeline {
    pub fn channels(&self) -> usize {
        if self.include_phase {
            2
        } else {
            1
        }
    }

    /// Number of `f32` values produced per series.
    pub fn input_len(&self) -> usize {
        self.channels() * self.height * self.width
    }

    /// Channel-major `[ch][H][W]` tensor, each channel normalized.
    pub fn features<X: ComplexSamples + ?Sized>(&self, x: &X) -> Result<Vec<f32>, SpectroError> {
        let img = make_features(x, &self.spectro)?;
        let img = normalize(&downsample(&img, self.height, self.width)?);
        let mut out: Vec<f32> = img.log_power.data.iter().map(|v| *v as f32).collect();
        if self.include_phase {
            out.extend(img.phase.data.iter().map(|v| *v as f32));
        }
        Ok(out)
    }
}
