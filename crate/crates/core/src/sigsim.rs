//! Narrowband signal simulator.
//!
//! A simulation is a complex time series
//!
//! ```text
//! s(t) = A(t) · exp(i·θ(t)) + n(t)
//! ω(t) = ω0 + (ω1 + ω1dot·t)·t + B·Σ_{τ≤t} Ω(τ),   Ω ~ U[-1, 1]
//! A(t) = A0 · W(t | T, D, φw)
//! ```
//!
//! where `θ(t)` is either `ω(t)·t + φ` ([`PhaseMode::Literal`]) or the
//! running phase `φ + Σ_{τ≤t} ω(τ)` ([`PhaseMode::Accumulate`], the default,
//! which treats `ω(t)` as instantaneous frequency). `n(t)` is independent
//! Gaussian noise of width `σ` on each component.
//!
//! Once `|ω(t)|` leaves `[-π, π]` the signal amplitude is latched to zero for
//! the rest of the series so that the tone never wraps around the band.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, RandomStream, StreamPurpose};

/// Samples per simulation.
pub const SIM_LEN: usize = 196_608;
/// Per-component noise width, in 8-bit digitizer units.
pub const NOISE_SIGMA: f64 = 13.0;
/// Number of signal classes, including `noise`.
pub const NUM_CLASSES: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown signal class '{0}'")]
    UnknownClass(String),
}

/// The seven simulated classes. Codes follow alphabetical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalClass {
    Brightpixel = 0,
    Narrowband = 1,
    Narrowbanddrd = 2,
    Noise = 3,
    Squarepulsednarrowband = 4,
    Squiggle = 5,
    Squigglesquarepulsednarrowband = 6,
}

impl SignalClass {
    pub const ALL: [SignalClass; NUM_CLASSES] = [
        SignalClass::Brightpixel,
        SignalClass::Narrowband,
        SignalClass::Narrowbanddrd,
        SignalClass::Noise,
        SignalClass::Squarepulsednarrowband,
        SignalClass::Squiggle,
        SignalClass::Squigglesquarepulsednarrowband,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalClass::Brightpixel => "brightpixel",
            SignalClass::Narrowband => "narrowband",
            SignalClass::Narrowbanddrd => "narrowbanddrd",
            SignalClass::Noise => "noise",
            SignalClass::Squarepulsednarrowband => "squarepulsednarrowband",
            SignalClass::Squiggle => "squiggle",
            SignalClass::Squigglesquarepulsednarrowband => "squigglesquarepulsednarrowband",
        }
    }
}

impl fmt::Display for SignalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalClass {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| SimError::UnknownClass(s.to_string()))
    }
}

/// How the carrier phase is formed from the frequency trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// `θ(t) = ω(t)·t + φ`, the expression exactly as written.
    Literal,
    /// `θ(t) = φ + Σ_{τ≤t} ω(τ)`; `ω(t)` is the instantaneous frequency.
    #[default]
    Accumulate,
}

impl FromStr for PhaseMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(PhaseMode::Literal),
            "accumulate" => Ok(PhaseMode::Accumulate),
            other => Err(SimError::InvalidParameter(format!("phase mode '{other}'"))),
        }
    }
}

/// Overrides for the sampled amplitude `A0/σ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AmplitudeOverride {
    /// Draw from the class's tabulated range.
    #[default]
    Table,
    /// Fix `A0 = 13·a` for every non-noise class.
    Fixed(f64),
    /// Draw `A0/13` uniformly from `[lo, hi]` for every non-noise class.
    Range(f64, f64),
}

/// All physics parameters of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub class: SignalClass,
    #[serde(rename = "A0")]
    pub a0: f64,
    /// Starting frequency, rad/sample.
    pub omega0: f64,
    /// Drift rate, rad/sample².
    pub omega1: f64,
    /// Drift-rate derivative, rad/sample³.
    pub omega1dot: f64,
    /// Squiggle amplitude.
    #[serde(rename = "B")]
    pub b: f64,
    /// Square-wave period in samples.
    #[serde(rename = "T")]
    pub period: f64,
    /// Square-wave duty cycle.
    #[serde(rename = "D")]
    pub duty: f64,
    /// Square-wave start phase in samples.
    pub phi_w: f64,
    /// Carrier phase offset in radians.
    pub phi: f64,
    pub seed: u64,
    #[serde(rename = "L")]
    pub len: usize,
    pub sigma: f64,
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        validate_square(self.period, self.duty)?;
        if self.period > self.len as f64 {
            return Err(SimError::InvalidParameter(format!(
                "period {} exceeds length {}",
                self.period, self.len
            )));
        }
        let finite = [
            self.a0, self.omega0, self.omega1, self.omega1dot, self.b, self.phi_w, self.phi,
            self.sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidParameter("non-finite value".into()));
        }
        if self.sigma < 0.0 {
            return Err(SimError::InvalidParameter(format!("sigma {}", self.sigma)));
        }
        Ok(())
    }
}

/// Complex series before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatIq {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl FloatIq {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

/// Complex series as 8-bit signed components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IqSeries {
    pub re: Vec<i8>,
    pub im: Vec<i8>,
}

impl IqSeries {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

fn uniform(rng: &mut RandomStream, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples a parameter set for `class` with the tabulated ranges. The seed
/// field is left at zero; see [`simulation_params`].
pub fn sample_params(class: SignalClass, rng: &mut RandomStream) -> SimParams {
    sample_params_with(class, rng, AmplitudeOverride::Table)
}

/// Like [`sample_params`], with the amplitude replaced per `amp`. The same
/// number of values is drawn from `rng` regardless of the override.
pub fn sample_params_with(
    class: SignalClass,
    rng: &mut RandomStream,
    amp: AmplitudeOverride,
) -> SimParams {
    use SignalClass::*;

    let len = SIM_LEN;
    let l = len as f64;
    let omega0 = uniform(rng, -2.0 * PI / 3.0, 2.0 * PI / 3.0);
    let omega1 = uniform(rng, -7.324e-6, 7.324e-6);
    let phi = rng.random_range(0.0..2.0 * PI);
    let phi_w = uniform(rng, 0.07 * l, 0.93 * l);

    let amp_range = match class {
        Narrowband | Narrowbanddrd | Squarepulsednarrowband => (0.05, 0.4),
        Squiggle | Squigglesquarepulsednarrowband => (0.1, 0.5),
        Brightpixel => (0.05, 0.75),
        Noise => (0.0, 0.0),
    };
    let mut a_rel = uniform(rng, amp_range.0, amp_range.1);

    let omega1dot = if class == Narrowbanddrd {
        let magnitude = uniform(rng, 1e-8, 8e-8);
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    } else {
        0.0
    };
    let b = match class {
        Squiggle | Squigglesquarepulsednarrowband => uniform(rng, 1e-4, 5e-3),
        _ => 0.0,
    };
    let period = match class {
        Squarepulsednarrowband | Squigglesquarepulsednarrowband => {
            uniform(rng, 0.15625, 0.46875) * l
        }
        _ => l,
    };
    let duty = match class {
        Squarepulsednarrowband => uniform(rng, 0.05, 0.9),
        Squigglesquarepulsednarrowband => uniform(rng, 0.15, 0.8),
        Brightpixel => uniform(rng, 0.0078125, 0.03125),
        _ => 1.0,
    };

    // Drawn unconditionally so overrides leave the other parameters intact.
    let override_draw: f64 = rng.random();
    if class != Noise {
        match amp {
            AmplitudeOverride::Table => {}
            AmplitudeOverride::Fixed(a) => a_rel = a,
            AmplitudeOverride::Range(lo, hi) => a_rel = lo + (hi - lo) * override_draw,
        }
    }

    SimParams {
        class,
        a0: NOISE_SIGMA * a_rel,
        omega0,
        omega1,
        omega1dot,
        b,
        period,
        duty,
        phi_w,
        phi,
        seed: 0,
        len,
        sigma: NOISE_SIGMA,
    }
}

/// Samples the parameters for the simulation identified by `seed`.
pub fn simulation_params(class: SignalClass, seed: u64, amp: AmplitudeOverride) -> SimParams {
    let mut rng = rng::stream(seed, StreamPurpose::Params);
    let mut params = sample_params_with(class, &mut rng, amp);
    params.seed = seed;
    params
}

fn validate_square(period: f64, duty: f64) -> Result<(), SimError> {
    if !(period > 0.0) || !period.is_finite() {
        return Err(SimError::InvalidParameter(format!("period {period}")));
    }
    if !(0.0..=1.0).contains(&duty) {
        return Err(SimError::InvalidParameter(format!("duty cycle {duty}")));
    }
    Ok(())
}

#[inline]
fn square_wave_unchecked(t: usize, period: f64, duty: f64, phi_w: f64) -> bool {
    (t as f64 - phi_w).rem_euclid(period) < duty * period
}

/// Square-wave modulation `W(t | T, D, φw)`: 1 while `(t - φw) mod T < D·T`.
pub fn square_wave(t: usize, period: f64, duty: f64, phi_w: f64) -> Result<u8, SimError> {
    validate_square(period, duty)?;
    Ok(square_wave_unchecked(t, period, duty, phi_w) as u8)
}

/// Frequency trajectory `ω(t)` for `t = 0..L`. The random walk draws one
/// `Ω` per sample from `rng`; nothing is drawn when `B = 0`.
pub fn frequency_trajectory(params: &SimParams, rng: &mut RandomStream) -> Vec<f64> {
    let mut walk = 0.0;
    (0..params.len)
        .map(|t| {
            let tf = t as f64;
            let mut w = params.omega0 + (params.omega1 + params.omega1dot * tf) * tf;
            if params.b != 0.0 {
                walk += rng.random_range(-1.0..=1.0);
                w += params.b * walk;
            }
            w
        })
        .collect()
}

/// First sample at which the trajectory leaves `[-π, π]`.
pub fn alias_latch_index(omega: &[f64]) -> Option<usize> {
    omega.iter().position(|w| *w > PI || *w < -PI)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn new(start: f64) -> Self {
        Self { sum: start, carry: 0.0 }
    }

    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Unwrapped carrier phase for the given trajectory.
pub fn phase_track(params: &SimParams, omega: &[f64], mode: PhaseMode) -> Vec<f64> {
    match mode {
        PhaseMode::Literal => omega
            .iter()
            .enumerate()
            .map(|(t, w)| w * t as f64 + params.phi)
            .collect(),
        PhaseMode::Accumulate => {
            let mut acc = CompensatedSum::new(params.phi);
            omega
                .iter()
                .map(|w| {
                    acc.add(*w);
                    acc.value()
                })
                .collect()
        }
    }
}

/// Synthesizes the pre-quantization series for `params`. The walk and noise
/// streams are derived from `params.seed`.
pub fn synthesize(params: &SimParams, mode: PhaseMode) -> Result<FloatIq, SimError> {
    params.validate()?;
    let n = params.len;
    let mut walk_rng = rng::stream(params.seed, StreamPurpose::Walk);
    let omega = frequency_trajectory(params, &mut walk_rng);
    let latch = alias_latch_index(&omega).unwrap_or(n);

    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    if params.a0 != 0.0 {
        let phase = phase_track(params, &omega[..latch], mode);
        for (t, theta) in phase.iter().enumerate() {
            if square_wave_unchecked(t, params.period, params.duty, params.phi_w) {
                let (s, c) = theta.sin_cos();
                re[t] = params.a0 * c;
                im[t] = params.a0 * s;
            }
        }
    }

    if params.sigma > 0.0 {
        let mut noise = rng::stream(params.seed, StreamPurpose::Noise);
        for t in 0..n {
            let zr: f64 = noise.sample(StandardNormal);
            let zi: f64 = noise.sample(StandardNormal);
            re[t] += params.sigma * zr;
            im[t] += params.sigma * zi;
        }
    }
    Ok(FloatIq { re, im })
}

#[inline]
fn quantize_component(x: f64) -> i8 {
    // f64::round is half-away-from-zero; `as` saturates.
    x.round().clamp(-128.0, 127.0) as i8
}

/// Rounds each component half away from zero and clamps to `[-128, 127]`.
pub fn quantize(x: &FloatIq) -> IqSeries {
    IqSeries {
        re: x.re.iter().map(|v| quantize_component(*v)).collect(),
        im: x.im.iter().map(|v| quantize_component(*v)).collect(),
    }
}

/// Samples parameters for `seed` and produces the quantized series.
pub fn simulate(
    class: SignalClass,
    seed: u64,
    amp: AmplitudeOverride,
    mode: PhaseMode,
) -> Result<(SimParams, IqSeries), SimError> {
    let params = simulation_params(class, seed, amp);
    let iq = quantize(&synthesize(&params, mode)?);
    Ok((params, iq))
}
