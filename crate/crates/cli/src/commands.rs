use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rayon::prelude::*;
use serde_json::{json, Value};
use sigclass::dataset::{
    generate_corpus, generate_sweep, kfold_split, read_iq_any, CorpusSpec, DatasetError, Manifest, Split, SweepSpec,
};
use sigclass::detector::{calibrate_threshold, detect, DetectorError, DriftConfig};
use sigclass::evalx::{argmax, confusion, predict_manifest, report, sweep_eval, EvalError};
use sigclass::rng::derive_seed;
use sigclass::sigsim::{AmplitudeOverride, PhaseMode};
use sigclass::spectro::{make_features, power_spectrogram, write_pgm, FeaturePipeline, SpectroConfig, SpectroError};
use sigclass::{SignalClass, NUM_CLASSES};
use wrn::{io, train, Ensemble, FeatureSet, TrainConfig, WrnConfig, WrnError, WrnModel};

use crate::{
    Channel, Cli, Command, DetectArgs, EvalArgs, Failure, GenerateArgs, PhaseArg, RenderArgs, SpectroArgs, SweepArgs,
    TrainArgs, DATA, NUMERIC, USAGE,
};

type Res<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::new(USAGE, anyhow!(msg.into()))
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let code = if matches!(e, DatasetError::InvalidArgument(_)) { USAGE } else { DATA };
        Failure::new(code, e)
    }
}

impl From<SpectroError> for Failure {
    fn from(e: SpectroError) -> Self {
        let code = if matches!(e, SpectroError::Config(_)) { USAGE } else { DATA };
        Failure::new(code, e)
    }
}

impl From<WrnError> for Failure {
    fn from(e: WrnError) -> Self {
        let code = match e {
            WrnError::Config(_) => USAGE,
            WrnError::Numeric(_) => NUMERIC,
            _ => DATA,
        };
        Failure::new(code, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(DATA, e)
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        let code = if matches!(e, DetectorError::InvalidArgument(_)) { USAGE } else { DATA };
        Failure::new(code, e)
    }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(DATA, anyhow!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Res<()> {
    fs::write(path, contents).map_err(io_fail(path))
}

fn ensure_dir(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(io_fail(dir))
}

pub fn run(cli: &Cli) -> Res<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Detect(a) => detect_cmd(cli, a),
    }
}

/// Flattens the parsed command line into `key = value` lines; the result can
/// be passed back with `--config`.
pub fn run_config_text(cli: &Cli) -> String {
    let v = serde_json::to_value(cli).unwrap_or(Value::Null);
    let mut out = String::new();
    let mut lines = Vec::new();
    let mut push = |k: &str, v: &Value| {
        let text = match v {
            Value::Null => return,
            Value::String(s) => s.clone(),
            Value::Array(items) => {
                if items.is_empty() {
                    return;
                }
                items.iter().map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string)).collect::<Vec<_>>().join(",")
            }
            other => other.to_string(),
        };
        lines.push(format!("{} = {text}", k.replace('_', "-")));
    };
    if let Some(t) = v.get("threads") {
        push("threads", t);
    }
    if let Some(cmd) = v.get("command").and_then(Value::as_object) {
        if let Some(name) = cmd.get("command").and_then(Value::as_str) {
            let _ = writeln!(out, "# sigclass {name}");
        }
        for (k, val) in cmd {
            if k == "command" {
                continue;
            }
            match val {
                Value::Object(inner) => inner.iter().for_each(|(k2, v2)| push(k2, v2)),
                _ => push(k, val),
            }
        }
    }
    for l in lines {
        let _ = writeln!(out, "{l}");
    }
    out
}

fn write_run_config(cli: &Cli, path: &Path) -> Res<()> {
    write_file(path, &run_config_text(cli))
}

fn spectro_config(s: &SpectroArgs) -> Res<SpectroConfig> {
    let cfg = SpectroConfig { rows: s.rows, cols: s.cols, ..SpectroConfig::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn phase_mode(p: PhaseArg) -> PhaseMode {
    match p {
        PhaseArg::Accumulate => PhaseMode::Accumulate,
        PhaseArg::Literal => PhaseMode::Literal,
    }
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Res<()> {
    ensure_dir(&a.out)?;
    let manifest = if a.sweep {
        if !a.classes.is_empty() || a.count_per_class > 0 || a.folds.is_some() {
            return Err(usage("--classes, --count-per-class and --folds do not apply to --sweep"));
        }
        let mut spec = SweepSpec::with_defaults(a.seed, a.per_class, &a.out);
        if !a.amplitudes.is_empty() {
            spec.amplitudes = a.amplitudes.clone();
        }
        spec.phase_mode = phase_mode(a.phase_mode);
        generate_sweep(&spec)?
    } else {
        let classes: Vec<SignalClass> = if a.classes.is_empty() {
            SignalClass::ALL.to_vec()
        } else {
            a.classes.iter().map(|c| c.parse().map_err(|e| usage(format!("{e}")))).collect::<Res<_>>()?
        };
        let mut spec = CorpusSpec::uniform(0, a.seed, &a.out);
        for c in classes {
            spec.counts[c.code()] = a.count_per_class;
        }
        spec.phase_mode = phase_mode(a.phase_mode);
        spec.split = a.split.parse().map_err(usage)?;
        spec.amplitude = match (a.amplitude, a.amp_range) {
            (Some(v), _) => AmplitudeOverride::Fixed(v),
            (None, Some((lo, hi))) => AmplitudeOverride::Range(lo, hi),
            (None, None) => AmplitudeOverride::Table,
        };
        let m = generate_corpus(&spec)?;
        match a.folds {
            Some(k) => {
                let m = kfold_split(&m, k, a.seed)?;
                m.save()?;
                m
            }
            None => m,
        }
    };
    write_run_config(cli, &a.out.join("run_config.txt"))?;
    println!("wrote {} records to {}", manifest.len(), a.out.display());
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> Res<()> {
    let iq = read_iq_any(&a.input)?;
    if iq.is_empty() {
        return Err(Failure::new(DATA, anyhow!("{}: no samples", a.input.display())));
    }
    let img = make_features(&iq, &spectro_config(&a.spectro)?)?;
    let plane = match a.channel {
        Channel::Power => &img.log_power,
        Channel::Phase => &img.phase,
    };
    write_pgm(&a.out, plane)?;
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".run_config.txt");
    write_run_config(cli, Path::new(&sidecar))?;
    println!("wrote {}x{} image to {}", plane.rows, plane.cols, a.out.display());
    Ok(())
}

fn fold_of(split: Split) -> Option<usize> {
    match split {
        Split::Fold(i) => Some(i),
        _ => None,
    }
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Res<()> {
    if a.ensemble == 0 {
        return Err(usage("--ensemble must be at least 1"));
    }
    let wrn_cfg = WrnConfig {
        depth: a.depth,
        widen: a.widen,
        dropout: a.dropout,
        in_channels: if a.no_phase { 1 } else { 2 },
        classes: NUM_CLASSES,
        input_h: a.height,
        input_w: a.width,
    };
    wrn_cfg.validate()?;
    let base = TrainConfig {
        lr: a.lr,
        lr_decay: a.lr_decay,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        ..TrainConfig::with_epochs(a.epochs, a.seed)
    };
    base.validate()?;
    let pipeline = FeaturePipeline {
        spectro: spectro_config(&a.spectro)?,
        height: a.height,
        width: a.width,
        include_phase: !a.no_phase,
    };

    let manifest = Manifest::load(&a.data)?;
    let pool = manifest.filter(|r| !matches!(r.split, Split::Test | Split::Sweep));
    if pool.is_empty() {
        return Err(Failure::new(DATA, anyhow!("{}: no training records", a.data.display())));
    }
    let pool = if pool.records.iter().all(|r| fold_of(r.split).is_some()) {
        pool
    } else {
        kfold_split(&pool, a.folds, a.seed)?
    };
    let k = pool.records.iter().filter_map(|r| fold_of(r.split)).max().map_or(0, |m| m + 1);
    if a.ensemble > k {
        return Err(usage(format!("--ensemble {} needs at least that many folds, corpus has {k}", a.ensemble)));
    }
    ensure_dir(&a.out)?;
    write_run_config(cli, &a.out.join("run_config.txt"))?;

    eprintln!("extracting features for {} records", pool.len());
    let features = FeatureSet::from_manifest(&pool, &pipeline)?;
    for m in 0..a.ensemble {
        let (val_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..pool.len()).partition(|&i| fold_of(pool.records[i].split) == Some(m));
        let tr = features.subset(&train_idx);
        let va = features.subset(&val_idx);
        let cfg = TrainConfig { seed: derive_seed(a.seed, &[m as u64]), ..base.clone() };
        eprintln!("member {m}: {} train / {} val", tr.len(), va.len());
        let (model, history) = train(&tr, &va, &wrn_cfg, &cfg, |e| {
            eprintln!("  epoch {:3}  loss {:.4}  val_acc {:.4}", e.epoch, e.train_loss, e.val_acc);
        })?;
        io::save(&model, &a.out.join(format!("model_{m}.wrnw")))?;
        write_file(&a.out.join(format!("history_{m}.csv")), &history.to_csv())?;
        println!(
            "member {m}: best val_acc {:.4} at epoch {}",
            history.best_val_acc(),
            history.best_epoch.map_or_else(|| "-".into(), |e| e.to_string())
        );
    }
    Ok(())
}

/// A single weight file, or every `model_*.wrnw` in a directory.
pub fn load_models(path: &Path) -> Res<Ensemble> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_fail(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("model_") && name.ends_with(".wrnw")
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Failure::new(DATA, anyhow!("{}: no model files", path.display())));
    }
    let models = files.iter().map(|f| io::load(f)).collect::<Result<Vec<WrnModel<f32>>, _>>()?;
    Ensemble::new(models).map_err(|e| Failure::new(DATA, e))
}

fn pipeline_for(ens: &Ensemble, s: &SpectroArgs) -> Res<FeaturePipeline> {
    let c = ens.members()[0].config();
    Ok(FeaturePipeline {
        spectro: spectro_config(s)?,
        height: c.input_h,
        width: c.input_w,
        include_phase: c.in_channels == 2,
    })
}

fn parse_predictions(path: &Path) -> Res<(Vec<SignalClass>, Vec<SignalClass>)> {
    let text = fs::read_to_string(path).map_err(io_fail(path))?;
    let (mut actual, mut pred) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("actual")) {
            continue;
        }
        let bad = || Failure::new(DATA, anyhow!("{}:{}: expected `actual,predicted`", path.display(), n + 1));
        let (a, p) = line.split_once(',').ok_or_else(bad)?;
        actual.push(a.trim().parse().map_err(|_| bad())?);
        pred.push(p.trim().parse().map_err(|_| bad())?);
    }
    Ok((actual, pred))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Res<()> {
    ensure_dir(&a.out)?;
    let (actual, pred) = if let Some(p) = &a.predictions {
        parse_predictions(p)?
    } else {
        let model_path = a.model.as_ref().ok_or_else(|| usage("--model or --predictions is required"))?;
        let data = a.data.as_ref().ok_or_else(|| usage("--data is required with --model"))?;
        let ens = load_models(model_path)?;
        let pipeline = pipeline_for(&ens, &a.spectro)?;
        let mut manifest = Manifest::load(data)?;
        if let Some(s) = &a.split {
            let split: Split = s.parse().map_err(usage)?;
            manifest = manifest.filter(|r| r.split == split);
        }
        if manifest.is_empty() {
            return Err(Failure::new(DATA, anyhow!("no records to evaluate")));
        }
        let probs = predict_manifest(&ens, &manifest, &pipeline)?;
        let mut csv = String::from("id,actual,predicted");
        for c in SignalClass::ALL {
            let _ = write!(csv, ",p_{c}");
        }
        csv.push('\n');
        for (r, p) in manifest.records.iter().zip(&probs) {
            let _ = write!(csv, "{},{},{}", r.id, r.class, argmax(p));
            for v in p {
                let _ = write!(csv, ",{v:.6}");
            }
            csv.push('\n');
        }
        write_file(&a.out.join("predictions.csv"), &csv)?;
        (manifest.records.iter().map(|r| r.class).collect(), probs.iter().map(argmax).collect())
    };
    let cm = confusion(&pred, &actual)?;
    let rep = report(&cm);
    write_file(&a.out.join("confusion.csv"), &cm.to_csv())?;
    write_file(&a.out.join("report.csv"), &rep.to_csv())?;
    write_run_config(cli, &a.out.join("run_config.txt"))?;
    println!("{rep}");
    Ok(())
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Res<()> {
    let ens = load_models(&a.model)?;
    let pipeline = pipeline_for(&ens, &a.spectro)?;
    let manifest = Manifest::load(&a.data)?;
    let rep = sweep_eval(&ens, &manifest, &pipeline)?;
    ensure_dir(&a.out)?;
    let csv = rep.to_csv();
    write_file(&a.out.join("sweep.csv"), &csv)?;
    write_run_config(cli, &a.out.join("run_config.txt"))?;
    print!("{csv}");
    Ok(())
}

fn detect_cmd(cli: &Cli, a: &DetectArgs) -> Res<()> {
    let spectro = spectro_config(&a.spectro)?;
    let dcfg = DriftConfig { max_drift: a.max_drift, steps: a.drift_steps };
    if !(a.max_drift.is_finite() && a.max_drift >= 0.0) || a.drift_steps == 0 {
        return Err(usage("--max-drift must be >= 0 and --drift-steps >= 1"));
    }
    let manifest = Manifest::load(&a.data)?;
    let threshold = match (a.threshold, a.far) {
        (Some(t), _) => t,
        (None, Some(far)) => {
            let noise = match &a.calibrate {
                Some(dir) => Manifest::load(dir)?,
                None => manifest.filter(|r| r.class == SignalClass::Noise),
            };
            let t = calibrate_threshold(&noise, &spectro, &dcfg, far)?;
            eprintln!("calibrated threshold {t:.4} on {} noise records (far {far})", noise.len());
            t
        }
        (None, None) => return Err(usage("one of --threshold or --far is required")),
    };
    let rows: Vec<Value> = manifest
        .records
        .par_iter()
        .map(|r| -> Res<Value> {
            let iq = manifest.read_series(r)?;
            let power = power_spectrogram(&iq, &spectro)?;
            let d = detect(&power, &dcfg, threshold)?;
            Ok(json!({
                "id": r.id,
                "class": r.class,
                "score": d.score,
                "drift": d.drift,
                "start_bin": d.start_bin,
                "detected": d.detected,
            }))
        })
        .collect::<Res<_>>()?;
    ensure_dir(&a.out)?;
    let path = a.out.join("detections.jsonl");
    let mut f = fs::File::create(&path).map_err(io_fail(&path))?;
    for row in &rows {
        writeln!(f, "{row}").map_err(io_fail(&path))?;
    }
    write_run_config(cli, &a.out.join("run_config.txt"))?;
    let hits = rows.iter().filter(|r| r["detected"] == Value::Bool(true)).count();
    println!("{hits} of {} records above threshold {threshold:.4}", rows.len());
    Ok(())
}
