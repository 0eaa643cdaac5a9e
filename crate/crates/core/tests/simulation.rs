use std::f64::consts::PI;

use proptest::prelude::*;
use sigclass::sigsim::{
    alias_latch_index, frequency_trajectory, simulation_params, square_wave, synthesize, AmplitudeOverride,
    PhaseMode, SimParams,
};
use sigclass::spectro::{make_features, power_spectrogram, SpectroConfig};
use sigclass::{rng, SignalClass, NOISE_SIGMA, SIM_LEN};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn tone(omega0: f64, omega1: f64, a0: f64, sigma: f64, seed: u64) -> SimParams {
    SimParams {
        a0,
        omega0,
        omega1,
        omega1dot: 0.0,
        b: 0.0,
        sigma,
        seed,
        ..simulation_params(SignalClass::Narrowband, 0, AmplitudeOverride::Table)
    }
}

fn row_argmax(p: &sigclass::spectro::Plane, r: usize) -> usize {
    let row = p.row(r);
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
}

fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        sxy += (i as f64 - xm) * (v - ym);
        sxx += (i as f64 - xm) * (i as f64 - xm);
    }
    sxy / sxx
}

fn ranges(class: SignalClass) -> (f64, f64) {
    use SignalClass::*;
    match class {
        Narrowband | Narrowbanddrd | Squarepulsednarrowband => (0.05, 0.4),
        Squiggle | Squigglesquarepulsednarrowband => (0.1, 0.5),
        Brightpixel => (0.05, 0.75),
        Noise => (0.0, 0.0),
    }
}

proptest! {
    #[test]
    fn sampled_parameters_stay_in_their_class_ranges(code in 0usize..7, seed in any::<u64>()) {
        use SignalClass::*;
        let class = SignalClass::from_code(code).unwrap();
        let p = simulation_params(class, seed, AmplitudeOverride::Table);
        let l = SIM_LEN as f64;
        let (lo, hi) = ranges(class);
        prop_assert!(p.a0 / NOISE_SIGMA >= lo && p.a0 / NOISE_SIGMA <= hi);
        prop_assert!(p.omega0.abs() <= 2.0 * PI / 3.0);
        prop_assert!(p.omega1.abs() <= 7.324e-6);
        prop_assert!((0.0..2.0 * PI).contains(&p.phi));
        prop_assert!(p.phi_w >= 0.07 * l && p.phi_w <= 0.93 * l);
        prop_assert_eq!(p.sigma, NOISE_SIGMA);
        prop_assert_eq!(p.len, SIM_LEN);
        prop_assert!(p.validate().is_ok());

        if class == Narrowbanddrd {
            prop_assert!(p.omega1dot.abs() >= 1e-8 && p.omega1dot.abs() <= 8e-8);
        } else {
            prop_assert_eq!(p.omega1dot, 0.0);
        }
        if matches!(class, Squiggle | Squigglesquarepulsednarrowband) {
            prop_assert!(p.b >= 1e-4 && p.b <= 5e-3);
        } else {
            prop_assert_eq!(p.b, 0.0);
        }
        if matches!(class, Squarepulsednarrowband | Squigglesquarepulsednarrowband) {
            prop_assert!(p.period >= 0.15625 * l && p.period <= 0.46875 * l);
        } else {
            prop_assert_eq!(p.period, l);
        }
        let (dlo, dhi) = match class {
            Squarepulsednarrowband => (0.05, 0.9),
            Squigglesquarepulsednarrowband => (0.15, 0.8),
            Brightpixel => (0.0078125, 0.03125),
            _ => (1.0, 1.0),
        };
        prop_assert!(p.duty >= dlo && p.duty <= dhi);
    }

    #[test]
    fn amplitude_range_override_is_respected(code in 0usize..6, seed in any::<u64>()) {
        let class = [0, 1, 2, 4, 5, 6].map(|c| SignalClass::from_code(c).unwrap())[code];
        let p = simulation_params(class, seed, AmplitudeOverride::Range(0.1, 0.4));
        prop_assert!(p.a0 / NOISE_SIGMA >= 0.1 && p.a0 / NOISE_SIGMA <= 0.4);
    }

    #[test]
    fn one_period_of_square_wave_has_duty_fraction(
        period in 2.0f64..5000.0,
        duty in 0.0f64..=1.0,
        phi_w in 0.0f64..10_000.0,
    ) {
        // Integer samples in one period starting at the rising edge.
        let start = phi_w.ceil() as usize;
        let end = (phi_w + period).ceil() as usize;
        let on: usize = (start..end).map(|t| square_wave(t, period, duty, phi_w).unwrap() as usize).sum();
        prop_assert!((on as f64 - duty * period).abs() <= 1.0, "on {on} of {period}");
    }
}

#[test]
fn noise_components_are_normal_with_sigma_13() {
    let p = simulation_params(SignalClass::Noise, rng::derive_seed(5, &[1]), AmplitudeOverride::Table);
    let x = synthesize(&p, PhaseMode::Accumulate).unwrap();
    let mut v: Vec<f64> = x.re.iter().chain(&x.im).copied().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 0.1, "mean {mean}");
    assert!((12.9..=13.1).contains(&std), "std {std}");

    v.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 13.0).unwrap();
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = normal.cdf(a);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    // Asymptotic Kolmogorov critical value at 1%.
    let critical = (-0.5 * (0.01f64 / 2.0).ln()).sqrt() / n.sqrt();
    assert!(d < critical, "KS D = {d}, critical {critical}");
}

#[test]
fn noise_phase_is_uniform() {
    let p = simulation_params(SignalClass::Noise, 17, AmplitudeOverride::Table);
    let x = synthesize(&p, PhaseMode::Accumulate).unwrap();
    let f = make_features(&x, &SpectroConfig::default()).unwrap();
    let bins = 32;
    let mut counts = vec![0usize; bins];
    for &a in &f.phase.data {
        assert!(a > -PI && a <= PI);
        let b = (((a + PI) / (2.0 * PI)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = f.phase.data.len() as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} vs {critical}");
}

#[test]
fn bin_centred_tone_peaks_in_its_bin_every_row() {
    let cfg = SpectroConfig::default();
    for k in [-200i64, -37, 0, 1, 100, 255] {
        let p = tone(2.0 * PI * k as f64 / cfg.cols as f64, 0.0, 13.0, 0.0, 1);
        let power = power_spectrogram(&synthesize(&p, PhaseMode::Accumulate).unwrap(), &cfg).unwrap();
        let expected = (k + cfg.cols as i64 / 2) as usize;
        for r in 0..cfg.rows {
            assert_eq!(row_argmax(&power, r), expected, "k {k} row {r}");
        }
    }
}

#[test]
fn drifting_tone_tracks_its_instantaneous_frequency() {
    let cfg = SpectroConfig::default();
    for (omega0, omega1, sigma) in [(-2.5, 2.5e-5, 0.0), (0.3, -7.0e-6, 0.0), (-1.0, 1.0e-5, NOISE_SIGMA)] {
        let p = tone(omega0, omega1, NOISE_SIGMA, sigma, 3);
        let power = power_spectrogram(&synthesize(&p, PhaseMode::Accumulate).unwrap(), &cfg).unwrap();
        let peaks: Vec<f64> = (0..cfg.rows).map(|r| row_argmax(&power, r) as f64).collect();
        // ω(t) advances ω1·C per row, and one bin is 2π/C.
        let c = cfg.cols as f64;
        let analytic = omega1 * c * c / (2.0 * PI);
        let measured = slope(&peaks);
        assert!((measured - analytic).abs() < 0.05, "slope {measured} vs {analytic}");
    }
}

#[test]
fn crossing_pi_latches_the_signal_off() {
    let p = tone(3.0, 5e-6, 13.0, 0.0, 4);
    let omega = frequency_trajectory(&p, &mut rng::stream(p.seed, rng::StreamPurpose::Walk));
    let latch = alias_latch_index(&omega).unwrap();
    assert_eq!(latch, ((PI - 3.0) / 5e-6).ceil() as usize);
    let x = synthesize(&p, PhaseMode::Accumulate).unwrap();
    assert!(x.re[..latch].iter().zip(&x.im[..latch]).all(|(a, b)| (a * a + b * b - 169.0).abs() < 1e-6));
    assert!(x.re[latch..].iter().chain(&x.im[latch..]).all(|v| *v == 0.0));
}
