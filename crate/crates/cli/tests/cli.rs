use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# tiny pair for fast end-to-end runs
seed = 5
classes = 3
per_class = 8
eval_per_class = 4
image_size = 16
channels = 1
shift.contrast_inversion = true
shift.texture_frequency = 0.4
shift.texture_amplitude = 0.3
source.epochs = 2
source.batch_size = 8
calibrator.epsilon = 0.5
calibrator.epochs = 1
calibrator.batch_size = 8
calibrator.patch_size = 4
calibrator.log_every = 2
disc.hidden = 8
sweep.epochs = 1
";

fn calibra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibra")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = calibra(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = calibra(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_owned();
        fs::write(root.join("cfg.txt"), config).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_owned()
    }
}

fn manifest_count(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.txt").count()
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let w = Workspace::new(TINY);
    ok(&["gen-data", "--config", &w.p("cfg.txt"), "--out", &w.p("a")]);
    ok(&["gen-data", "--config", &w.p("cfg.txt"), "--out", &w.p("b")]);
    for f in ["source.cald", "target.cald", "source_eval.cald", "target_eval.cald"] {
        assert_eq!(fs::read(w.root.join("a").join(f)).unwrap(), fs::read(w.root.join("b").join(f)).unwrap());
    }
    let src = calibra_core::data::load_dataset(w.root.join("a/source.cald")).unwrap();
    assert_eq!(src.len(), 24);
    assert_eq!(src.image_shape(), &[1, 16, 16]);
    let tgt = calibra_core::data::load_dataset(w.root.join("a/target.cald")).unwrap();
    assert!(!tgt.labels_visible());
    let ev = calibra_core::data::load_dataset(w.root.join("a/target_eval.cald")).unwrap();
    assert_eq!(ev.len(), 12);
    let manifest = fs::read_to_string(w.root.join("a/manifest.txt")).unwrap();
    assert!(manifest.starts_with("command = gen-data\n"));
    assert!(manifest.contains("per_class = 8"));
    assert_eq!(manifest_count(&w.root.join("a")), 1);

    ok(&["gen-data", "--config", &w.p("cfg.txt"), "--seed", "6", "--out", &w.p("c")]);
    assert_ne!(fs::read(w.root.join("a/source.cald")).unwrap(), fs::read(w.root.join("c/source.cald")).unwrap());
}

#[test]
fn missing_key_names_the_key() {
    let w = Workspace::new(&TINY.replace("image_size = 16\n", ""));
    let err = fail(&["gen-data", "--config", &w.p("cfg.txt"), "--out", &w.p("d")]);
    assert!(err.contains("'image_size'"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let w = Workspace::new(TINY);
    let err = fail(&["gen-data", "--out", &w.p("d")]);
    assert!(err.contains("--config"));
    let err = fail(&[
        "train-source", "--config", &w.p("cfg.txt"), "--data", &w.p("missing"), "--out", &w.p("s"),
    ]);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!calibra(&["eval", "--bogus-flag"]).status.success());
}

#[test]
fn scripted_pipeline_end_to_end() {
    let w = Workspace::new(TINY);
    let cfg = w.p("cfg.txt");
    ok(&["gen-data", "--config", &cfg, "--out", &w.p("data")]);
    let before: Vec<Vec<u8>> = ["source.cald", "target.cald"]
        .iter()
        .map(|f| fs::read(w.root.join("data").join(f)).unwrap())
        .collect();
    ok(&["train-source", "--config", &cfg, "--data", &w.p("data"), "--out", &w.p("src")]);
    let clf = w.p("src/classifier.ckpt");
    ok(&[
        "train-calibrator", "--config", &cfg, "--data", &w.p("data"), "--source-ckpt", &clf, "--out",
        &w.p("cal"),
    ]);
    let cal = w.p("cal/calibrator.ckpt");
    let report = ok(&[
        "eval", "--data", &w.p("data"), "--source-ckpt", &clf, "--calibrator-ckpt", &cal, "--out",
        &w.p("eval"),
    ]);
    assert!(report.contains("source") && report.contains("target"));
    let csv = fs::read_to_string(w.root.join("eval/tradeoff.csv")).unwrap();
    assert!(csv.starts_with("source_before,source_after"));
    assert_eq!(csv.lines().count(), 2);
    for f in ["source_steps.csv", "source_epochs.csv", "manifest.txt"] {
        assert!(w.root.join("src").join(f).exists(), "{f}");
    }
    for f in ["calibrator_steps.csv", "calibrator_epochs.csv", "d_pixel.ckpt", "d_feat.ckpt"] {
        assert!(w.root.join("cal").join(f).exists(), "{f}");
    }

    // identity calibrator reproduces source-only numbers
    ok(&["eval", "--data", &w.p("data"), "--source-ckpt", &clf, "--out", &w.p("ident")]);
    let fields: Vec<f64> = fs::read_to_string(w.root.join("ident/tradeoff.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(fields[0], fields[1]);
    assert_eq!(fields[3], fields[4]);

    let fft = ok(&[
        "fft", "--data", &w.p("data"), "--calibrator-ckpt", &cal, "--cutoff", "0.25", "--count", "5",
        "--out", &w.p("fft"),
    ]);
    assert!(fft.contains("before") && fft.contains("after"));
    let rows = fs::read_to_string(w.root.join("fft/fft.csv")).unwrap();
    assert_eq!(rows.lines().count(), 6);
    for line in rows.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    assert!(w.root.join("fft/spectrum_before.pgm").exists());

    let sweep = ok(&[
        "lsweep", "--config", &cfg, "--data", &w.p("data"), "--source-ckpt", &clf, "--epsilons", "0,0.1",
        "--out", &w.p("sweep"),
    ]);
    assert_eq!(sweep.lines().count(), 3);

    // inputs untouched
    let after: Vec<Vec<u8>> = ["source.cald", "target.cald"]
        .iter()
        .map(|f| fs::read(w.root.join("data").join(f)).unwrap())
        .collect();
    assert_eq!(before, after);

    // reruns are bit-identical
    ok(&["train-source", "--config", &cfg, "--data", &w.p("data"), "--out", &w.p("src2")]);
    assert_eq!(fs::read(&clf).unwrap(), fs::read(w.root.join("src2/classifier.ckpt")).unwrap());

    // a classifier built for another config is rejected by hash
    let other = Workspace::new(&TINY.replace("classes = 3", "classes = 4"));
    let err = fail(&[
        "train-calibrator", "--config", &other.p("cfg.txt"), "--data", &w.p("data"), "--source-ckpt",
        &clf, "--out", &w.p("bad"),
    ]);
    assert!(err.contains("does not match"), "{err}");

    // a calibrator checkpoint is not a classifier
    let err = fail(&["eval", "--data", &w.p("data"), "--source-ckpt", &cal, "--out", &w.p("bad2")]);
    assert!(err.contains("expected a classifier"), "{err}");
}
