use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use sigclass::dataset::{Manifest, Split, MANIFEST_FILE};
use sigclass::rng::derive_seed;
use sigclass::spectro::FeaturePipeline;
use sigclass::SignalClass;
use wrn::{io, train, FeatureSet, TrainConfig, WrnConfig};

fn sigclass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigclass")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sigclass(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Digests of the manifest and every data file.
fn corpus_digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let hash = |p: &Path| hex::encode(Sha256::digest(fs::read(p).unwrap()));
    out.insert(MANIFEST_FILE.to_string(), hash(&dir.join(MANIFEST_FILE)));
    for e in fs::read_dir(dir.join("data")).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), hash(&p));
    }
    out
}

const TABLE: [[usize; 7]; 7] = [
    [330, 0, 0, 55, 0, 0, 0],
    [0, 335, 10, 5, 5, 0, 0],
    [0, 0, 340, 7, 1, 0, 0],
    [1, 0, 0, 366, 1, 0, 0],
    [2, 2, 1, 24, 356, 0, 0],
    [0, 0, 0, 1, 0, 321, 0],
    [0, 0, 0, 8, 2, 0, 322],
];

#[test]
fn generate_writes_seventy_files_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--count-per-class", "10", "--seed", "1", "--out", s(&a)]);
    ok(&["--threads", "1", "generate", "--count-per-class", "10", "--seed", "1", "--out", s(&b)]);
    let da = corpus_digests(&a);
    assert_eq!(da.len(), 71);
    assert_eq!(Manifest::load(&a).unwrap().len(), 70);
    assert_eq!(da, corpus_digests(&b));

    let cfg = fs::read_to_string(a.join("run_config.txt")).unwrap();
    assert!(cfg.starts_with("# sigclass generate\n"));
    assert!(cfg.lines().any(|l| l == "seed = 1"));
    assert!(cfg.lines().any(|l| l == "count-per-class = 10"));
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("gen.conf");
    fs::write(&conf, "# corpus\ncount_per_class = 1\nseed = 99\nclasses = noise,squiggle\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--config", s(&conf), "--seed", "5", "--out", s(&a)]);
    ok(&["generate", "--count-per-class", "1", "--seed", "5", "--classes", "noise,squiggle", "--out", s(&b)]);
    assert_eq!(corpus_digests(&a), corpus_digests(&b));
    assert_eq!(Manifest::load(&a).unwrap().len(), 2);

    // The recorded config replays the run.
    let c = dir.path().join("c");
    let recorded = fs::read_to_string(a.join("run_config.txt")).unwrap();
    let replay = dir.path().join("replay.conf");
    fs::write(&replay, recorded.replace(s(&a), s(&c))).unwrap();
    ok(&["generate", "--config", s(&replay)]);
    assert_eq!(corpus_digests(&a), corpus_digests(&c));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(sigclass(&["--help"]).status.code(), Some(0));
    let help = sigclass(&["generate", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--classes", "--count-per-class", "--seed", "--out", "--sweep", "--folds", "--threads"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert_eq!(sigclass(&["generate", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(sigclass(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sigclass(&["generate", "--config", "/nonexistent/conf"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = sigclass(&["generate", "--out", s(dir.path()), "--count-per-class", "1", "--classes", "wobble"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sigclass(&["detect", "--data", s(dir.path()), "--out", s(&dir.path().join("o")), "--threshold", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_writes_pgm_of_the_spectrogram() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.iq8");
    fs::write(&empty, b"").unwrap();
    let img = dir.path().join("x.pgm");
    assert_eq!(sigclass(&["render", "--in", s(&empty), "--out", s(&img)]).status.code(), Some(2));

    let corpus = dir.path().join("c");
    ok(&["generate", "--count-per-class", "1", "--classes", "noise", "--out", s(&corpus)]);
    let m = Manifest::load(&corpus).unwrap();
    let iq = m.path_of(&m.records[0]);
    ok(&["render", "--in", s(&iq), "--out", s(&img)]);
    let bytes = fs::read(&img).unwrap();
    let header = b"P5\n512 384\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 384 * 512);
    let mut hist = [0usize; 256];
    pixels.iter().for_each(|&p| hist[p as usize] += 1);
    let peak = *hist.iter().max().unwrap() as f64 / pixels.len() as f64;
    assert!(peak <= 0.05, "largest gray-level bin holds {peak}");
    assert!(dir.path().join("x.pgm.run_config.txt").exists());

    let phase = dir.path().join("p.pgm");
    ok(&["render", "--in", s(&iq), "--channel", "phase", "--out", s(&phase)]);
    assert_eq!(fs::read(&phase).unwrap().len(), header.len() + 384 * 512);
}

#[test]
fn eval_of_published_predictions_reproduces_the_scores() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pred.csv");
    let mut text = String::from("actual,predicted\n");
    for (a, row) in TABLE.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                let name = |c| SignalClass::from_code(c).unwrap().name();
                text.push_str(&format!("{},{}\n", name(a), name(p)));
            }
        }
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("eval");
    ok(&["eval", "--predictions", s(&csv), "--out", s(&out)]);

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: BTreeMap<String, Vec<f64>> = report
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap().to_string();
            (name, f.filter(|v| !v.is_empty()).map(|v| v.parse().unwrap()).collect())
        })
        .collect();
    let expect = [
        ("brightpixel", [385.0, 0.991, 0.857, 0.919]),
        ("narrowband", [355.0, 0.994, 0.944, 0.968]),
        ("narrowbanddrd", [348.0, 0.969, 0.977, 0.973]),
        ("noise", [368.0, 0.785, 0.995, 0.877]),
        ("squarepulsednarrowband", [385.0, 0.975, 0.925, 0.949]),
        ("squiggle", [322.0, 1.0, 0.997, 0.998]),
        ("squigglesquarepulsednarrowband", [332.0, 1.0, 0.970, 0.984]),
    ];
    for (name, want) in expect {
        let got = &rows[name];
        assert_eq!(got[0], want[0]);
        for i in 1..4 {
            assert!((got[i] - want[i]).abs() <= 0.001, "{name}[{i}] = {}", got[i]);
        }
    }
    assert!((rows["macro_f1"][0] - 0.953).abs() < 0.005);
    let confusion = fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 8);
}

#[test]
fn tiny_pipeline_trains_sweeps_and_detects() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let model_dir = dir.path().join("model");
    ok(&["generate", "--count-per-class", "4", "--seed", "3", "--folds", "2", "--out", s(&corpus)]);
    let train_args = [
        "train", "--data", s(&corpus), "--out", s(&model_dir), "--epochs", "2", "--batch-size", "7",
        "--height", "8", "--width", "8", "--seed", "4", "--ensemble", "1",
    ];
    ok(&train_args);
    let history = fs::read_to_string(model_dir.join("history_0.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // Member 0 is a plain training run validated on fold 0.
    let manifest = Manifest::load(&corpus).unwrap();
    let pipeline = FeaturePipeline { height: 8, width: 8, ..FeaturePipeline::default() };
    let features = FeatureSet::from_manifest(&manifest, &pipeline).unwrap();
    let (va, tr): (Vec<usize>, Vec<usize>) = (0..manifest.len()).partition(|&i| manifest.records[i].split == Split::Fold(0));
    let cfg = WrnConfig { input_h: 8, input_w: 8, ..WrnConfig::default() };
    let tc = TrainConfig { batch_size: 7, ..TrainConfig::with_epochs(2, derive_seed(4, &[0])) };
    let (plain, _) = train(&features.subset(&tr), &features.subset(&va), &cfg, &tc, |_| {}).unwrap();
    let cli_model = io::load(&model_dir.join("model_0.wrnw")).unwrap();
    assert_eq!(io::encode(&cli_model), io::encode(&plain));

    // Rerunning gives identical weights.
    let again = dir.path().join("again");
    let mut rerun = train_args;
    rerun[4] = s(&again);
    ok(&rerun);
    assert_eq!(fs::read(again.join("model_0.wrnw")).unwrap(), fs::read(model_dir.join("model_0.wrnw")).unwrap());

    let sweep_dir = dir.path().join("sweep");
    ok(&["generate", "--sweep", "--per-class", "1", "--seed", "2", "--out", s(&sweep_dir)]);
    assert_eq!(Manifest::load(&sweep_dir).unwrap().len(), 14 * 7);
    let sweep_out = dir.path().join("sweep_out");
    ok(&["sweep", "--model", s(&model_dir), "--data", s(&sweep_dir), "--out", s(&sweep_out)]);
    let csv = fs::read_to_string(sweep_out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 15);
    assert!(csv.starts_with("amplitude,loss,accuracy,f1_brightpixel"));

    let eval_out = dir.path().join("eval");
    ok(&["eval", "--model", s(&model_dir.join("model_0.wrnw")), "--data", s(&corpus), "--split", "fold_0", "--out", s(&eval_out)]);
    assert_eq!(fs::read_to_string(eval_out.join("predictions.csv")).unwrap().lines().count(), 1 + 14);

    let det = dir.path().join("det");
    ok(&["detect", "--data", s(&corpus), "--far", "0.25", "--out", s(&det)]);
    let lines = fs::read_to_string(det.join("detections.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 28);
    assert_eq!(sigclass(&["detect", "--data", s(&corpus), "--out", s(&det)]).status.code(), Some(1));
}
