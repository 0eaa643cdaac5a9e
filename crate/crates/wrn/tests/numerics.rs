use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrn::gradcheck::check_gradients;
use wrn::layers::Tensor;
use wrn::{Mode, WrnConfig, WrnModel};

fn tiny(h: usize, w: usize, dropout: f64) -> WrnConfig {
    WrnConfig { depth: 10, widen: 1, dropout, in_channels: 2, classes: 7, input_h: h, input_w: w }
}

fn random_input(n: usize, cfg: &WrnConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * cfg.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, cfg.in_channels, cfg.input_h, cfg.input_w, data)
}

#[test]
fn every_gradient_matches_central_differences() {
    let cfg = tiny(8, 8, 0.0);
    let mut model = WrnModel::<f64>::build(cfg, 11).unwrap();
    // Non-trivial affine parameters so no gradient is structurally zero.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for e in model.store_mut().entries_mut() {
            if e.name.ends_with(".beta") || e.name.ends_with(".bias") {
                e.value.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
            if e.name.ends_with(".gamma") {
                e.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            }
        }
    }
    let x = random_input(3, &cfg, 9);
    // Gradients below 1e-6 are compared absolutely: at h = 1e-5 the
    // finite-difference rounding error there exceeds 1e-4 relative.
    let report = check_gradients(&mut model, &x, &[0, 3, 6], 1e-5, 1e-6).unwrap();
    assert_eq!(report.checked, model.param_count());
    assert!(report.worst_rel < 1e-4, "worst relative error {:e} at {}", report.worst_rel, report.worst);
}

/// The staged re-evaluation used by the checker must agree with a plain
/// forward pass.
#[test]
fn staged_forward_matches_full_forward() {
    let cfg = tiny(8, 8, 0.0);
    let mut model = WrnModel::<f64>::build(cfg, 3).unwrap();
    let x = random_input(2, &cfg, 1);
    let full = model.forward(&x, Mode::Train).unwrap();
    let inputs = model.stage_inputs(&x).unwrap();
    assert_eq!(inputs.len(), model.stages());
    for s in 0..model.stages() {
        assert_eq!(model.forward_train_from(s, &inputs[s]), full);
    }
    assert_eq!(model.stage_of(0), None);
    assert_eq!(model.stage_of(model.store().entries().len() - 1), Some(model.stages() - 1));
}

fn conv_direct(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], out_c: usize, k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let pad = (k - 1) / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; out_c * ho * wo];
    for o in 0..out_c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += weight[((o * c + ci) * k + ky) * k + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                y[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (y, ho, wo)
}

/// Straight-line eval-mode reference for a depth-10 network, looking weights
/// up by name.
fn reference_forward(model: &WrnModel<f64>, x: &[f64], cfg: &WrnConfig) -> Vec<f64> {
    let get = |name: &str| {
        model.store().entries().iter().find(|e| e.name == name).unwrap_or_else(|| panic!("{name}")).value.clone()
    };
    let bn_relu = |v: &[f64], c: usize, prefix: &str| {
        let (g, b, m, var) = (get(&format!("{prefix}.gamma")), get(&format!("{prefix}.beta")), get(&format!("{prefix}.running_mean")), get(&format!("{prefix}.running_var")));
        let hw = v.len() / c;
        v.iter()
            .enumerate()
            .map(|(i, &z)| {
                let ch = i / hw;
                (g[ch] * (z - m[ch]) / (var[ch] + 1e-5).sqrt() + b[ch]).max(0.0)
            })
            .collect::<Vec<f64>>()
    };
    let (mut z, mut h, mut w) = conv_direct(x, cfg.in_channels, cfg.input_h, cfg.input_w, &get("conv0.weight"), 16, 3, 1);
    let mut c = 16;
    for (g, (width, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
        let p = format!("group{g}.block0");
        let a = bn_relu(&z, c, &format!("{p}.bn1"));
        let (t, h2, w2) = conv_direct(&a, c, h, w, &get(&format!("{p}.conv1.weight")), width, 3, stride);
        let b = bn_relu(&t, width, &format!("{p}.bn2"));
        let (mut y, _, _) = conv_direct(&b, width, h2, w2, &get(&format!("{p}.conv2.weight")), width, 3, 1);
        let skip = if c != width || stride != 1 {
            conv_direct(&a, c, h, w, &get(&format!("{p}.shortcut.weight")), width, 1, stride).0
        } else {
            z.clone()
        };
        y.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
        (z, h, w, c) = (y, h2, w2, width);
    }
    let act = bn_relu(&z, c, "bn");
    let pooled: Vec<f64> = act.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
    let (fw, fb) = (get("fc.weight"), get("fc.bias"));
    (0..cfg.classes).map(|o| fb[o] + (0..c).map(|i| fw[o * c + i] * pooled[i]).sum::<f64>()).collect()
}

#[test]
fn forward_matches_direct_convolution_reference() {
    let cfg = tiny(16, 16, 0.3);
    let mut model = WrnModel::<f64>::build(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for e in model.store_mut().entries_mut() {
        if e.name.ends_with("running_mean") || e.name.ends_with(".beta") || e.name.ends_with(".bias") {
            e.value.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        if e.name.ends_with("running_var") || e.name.ends_with(".gamma") {
            e.value.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
    }
    let x = random_input(2, &cfg, 4);
    let got = model.forward_eval(&x).unwrap();
    for i in 0..2 {
        let want = reference_forward(&model, x.sample(i), &cfg);
        for (a, b) in got[i * 7..(i + 1) * 7].iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }
}

#[test]
fn zero_output_layer_gives_uniform_probabilities() {
    let cfg = tiny(8, 8, 0.0);
    let mut model = WrnModel::<f64>::build(cfg, 1).unwrap();
    for e in model.store_mut().entries_mut() {
        if e.name.starts_with("fc.") {
            e.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = random_input(4, &cfg, 3);
    let p = model.predict_proba(&x).unwrap();
    assert!(p.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
    let loss = model.loss_and_grads(&x, &[0, 1, 2, 3]).unwrap();
    assert!((loss - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn eval_is_deterministic_and_rows_sum_to_one() {
    let cfg = tiny(8, 8, 0.3);
    let model = WrnModel::<f32>::build(cfg, 8).unwrap();
    let x64 = random_input(5, &cfg, 2);
    let x = Tensor::from_vec(5, 2, 8, 8, x64.data.iter().map(|&v| v as f32).collect());
    let a = model.forward_eval(&x).unwrap();
    let b = model.forward_eval(&x).unwrap();
    assert_eq!(a, b);
    for row in model.predict_proba(&x).unwrap().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn build_is_deterministic_in_the_seed() {
    let cfg = tiny(8, 8, 0.3);
    let a = WrnModel::<f32>::build(cfg, 4).unwrap();
    let b = WrnModel::<f32>::build(cfg, 4).unwrap();
    let c = WrnModel::<f32>::build(cfg, 5).unwrap();
    assert_eq!(a.store(), b.store());
    assert_ne!(a.store(), c.store());
}

#[test]
fn wrn_34_2_has_about_1_9_million_parameters() {
    let cfg = WrnConfig { depth: 34, widen: 2, ..WrnConfig::default() };
    let model = WrnModel::<f32>::build(cfg, 0).unwrap();
    let n = model.param_count() as f64;
    assert!((n - 1.9e6).abs() / 1.9e6 <= 0.10, "{n}");
}

#[test]
fn confident_correct_prediction_has_near_zero_loss() {
    let cfg = tiny(8, 8, 0.0);
    let mut model = WrnModel::<f64>::build(cfg, 1).unwrap();
    for e in model.store_mut().entries_mut() {
        if e.name == "fc.weight" {
            e.value.iter_mut().for_each(|v| *v = 0.0);
        }
        if e.name == "fc.bias" {
            e.value[2] = 60.0;
        }
    }
    let x = random_input(2, &cfg, 1);
    assert!(model.loss_and_grads(&x, &[2, 2]).unwrap() < 1e-20);
}
