use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use calibra_core::config::ExperimentConfig;
use calibra_core::data::{load_dataset, save_dataset, DomainDataset};
use calibra_core::eval::{
    confusion, fft_spectrum, high_freq_ratios, tradeoff_report, write_spectrum_pgm,
};
use calibra_core::nets::{
    build_calibrator, calibrate_batch, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CalibratorConfig, Network, Role,
};
use calibra_core::train::{lsweep, sweep_csv, train_calibrator, train_source, TrainConfig};

use crate::{Command, Common};

const SOURCE: &str = "source.cald";
const TARGET: &str = "target.cald";
const SOURCE_EVAL: &str = "source_eval.cald";
const TARGET_EVAL: &str = "target_eval.cald";

/// Output directory that refuses to overwrite any of the command's inputs.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path, inputs: &[&Path]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let inputs = inputs.iter().filter_map(|p| p.canonicalize().ok()).collect();
        Ok(Self { dir: dir.to_owned(), inputs })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Ok(c) = p.canonicalize() {
            if self.inputs.contains(&c) {
                bail!("refusing to overwrite input file {}", p.display());
            }
        }
        Ok(p)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name)?;
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    /// Provenance record, written before any heavy work.
    fn manifest(&self, command: &str, cfg: Option<&ExperimentConfig>, inputs: &[(&str, &Path)]) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        for (k, p) in inputs {
            let _ = writeln!(s, "input.{k} = {}", p.display());
        }
        let _ = writeln!(s, "output = {}", self.dir.display());
        if let Some(cfg) = cfg {
            s.push_str(&cfg.to_text());
        }
        self.write("manifest.txt", &s)
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().ok_or_else(|| anyhow!("--config is required for this command"))?;
    let cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn load(dir: &Path, name: &str) -> Result<DomainDataset> {
    let p = dir.join(name);
    load_dataset(&p).with_context(|| format!("dataset {}", p.display()))
}

fn load_network(path: &Path, role: Role) -> Result<(Network, BTreeMap<String, String>)> {
    let ck = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    if ck.network.role() != role {
        bail!("checkpoint {} holds a {}, expected a {role}", path.display(), ck.network.role());
    }
    Ok((ck.network, ck.attrs))
}

fn budget(flag: Option<f64>, attrs: &BTreeMap<String, String>, path: &Path) -> Result<f64> {
    match (flag, attrs.get("epsilon")) {
        (Some(e), _) => Ok(e),
        (None, Some(v)) => v.parse().with_context(|| format!("bad epsilon attribute in {}", path.display())),
        (None, None) => bail!("no --epsilon given and {} records none", path.display()),
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::TrainSource { common, data } => cmd_train_source(&common, &data),
        Command::TrainCalibrator { common, data, source_ckpt, epsilon } => {
            cmd_train_calibrator(&common, &data, &source_ckpt, epsilon)
        }
        Command::Eval { common, data, source_ckpt, calibrator_ckpt, epsilon } => {
            cmd_eval(&common, &data, &source_ckpt, calibrator_ckpt.as_deref(), epsilon)
        }
        Command::Lsweep { common, data, source_ckpt, epsilons } => {
            cmd_lsweep(&common, &data, &source_ckpt, &epsilons)
        }
        Command::Fft { common, data, calibrator_ckpt, epsilon, cutoff, count } => {
            cmd_fft(&common, &data, &calibrator_ckpt, epsilon, cutoff, count)
        }
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let cfg_path = common.config.as_deref().expect("checked by load_config");
    let out = Outputs::new(&common.out, &[cfg_path])?;
    out.manifest("gen-data", Some(&cfg), &[("config", cfg_path)])?;
    let d = cfg.datasets()?;
    for (name, ds) in [
        (SOURCE, &d.source),
        (TARGET, &d.target),
        (SOURCE_EVAL, &d.source_eval),
        (TARGET_EVAL, &d.target_eval),
    ] {
        save_dataset(ds, out.path(name)?)?;
    }
    println!(
        "wrote {} source, {} target, {}+{} evaluation images to {}",
        d.source.len(),
        d.target.len(),
        d.source_eval.len(),
        d.target_eval.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train_source(common: &Common, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let cfg_path = common.config.as_deref().expect("checked by load_config");
    let src_path = data.join(SOURCE);
    let out = Outputs::new(&common.out, &[cfg_path, &src_path])?;
    out.manifest("train-source", Some(&cfg), &[("config", cfg_path), ("data", data)])?;
    let source = load(data, SOURCE)?;
    let mut clf = cfg.build_classifier()?;
    if clf.spec.input_shape != source.image_shape() {
        bail!(
            "config describes {:?} images but {} holds {:?}",
            clf.spec.input_shape,
            src_path.display(),
            source.image_shape()
        );
    }
    let log = train_source(&mut clf, &source, &cfg.source)?;
    clf.params.freeze();
    let train_acc = log.epochs().last().map_or(0.0, |e| e.source_acc);
    let attrs = BTreeMap::from([
        ("seed".to_owned(), cfg.seed.to_string()),
        ("train_accuracy".to_owned(), format!("{train_acc:.6}")),
    ]);
    save_checkpoint(&clf, &attrs, out.path("classifier.ckpt")?)?;
    out.write("source_steps.csv", &log.steps_csv())?;
    out.write("source_epochs.csv", &log.epochs_csv())?;
    println!(
        "classifier: {} parameters, final training accuracy {}, {:.1}s",
        clf.count_parameters(),
        pct(train_acc),
        log.wall_clock_secs
    );
    Ok(())
}

fn cmd_train_calibrator(common: &Common, data: &Path, source_ckpt: &Path, epsilon: Option<f64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epsilon {
        cfg.calibrator.epsilon = e;
        cfg.calibration.epsilon = e;
    }
    cfg.validate()?;
    let cfg_path = common.config.as_deref().expect("checked by load_config");
    let out = Outputs::new(&common.out, &[cfg_path, source_ckpt, &data.join(SOURCE), &data.join(TARGET)])?;
    out.manifest(
        "train-calibrator",
        Some(&cfg),
        &[("config", cfg_path), ("data", data), ("source_ckpt", source_ckpt)],
    )?;
    let clf = load_checkpoint_expecting(source_ckpt, &cfg.classifier_arch().spec())
        .with_context(|| format!("checkpoint {}", source_ckpt.display()))?
        .network;
    let source = load(data, SOURCE)?;
    let target = load(data, TARGET)?;
    let eps = cfg.calibration.epsilon;
    let (mut cal, mut dp, mut df) = cfg.build_adversarial(eps)?;
    let log = train_calibrator(&clf, &mut cal, &mut dp, &mut df, &source, &target, &cfg.calibration, None)?;
    let selected = log.selected_epoch.map_or_else(|| "none".to_owned(), |e| e.to_string());
    let attrs = BTreeMap::from([
        ("epsilon".to_owned(), eps.to_string()),
        ("seed".to_owned(), cfg.seed.to_string()),
        ("selected_epoch".to_owned(), selected.clone()),
    ]);
    save_checkpoint(&cal, &attrs, out.path("calibrator.ckpt")?)?;
    save_checkpoint(&dp, &attrs, out.path("d_pixel.ckpt")?)?;
    save_checkpoint(&df, &attrs, out.path("d_feat.ckpt")?)?;
    out.write("calibrator_steps.csv", &log.steps_csv())?;
    out.write("calibrator_epochs.csv", &log.epochs_csv())?;
    println!(
        "calibrator: {} parameters, epsilon {eps}, selected epoch {selected}, {:.1}s",
        cal.count_parameters(),
        log.wall_clock_secs
    );
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    source_ckpt: &Path,
    calibrator_ckpt: Option<&Path>,
    epsilon: Option<f64>,
) -> Result<()> {
    let mut inputs = vec![("data", data), ("source_ckpt", source_ckpt)];
    if let Some(p) = calibrator_ckpt {
        inputs.push(("calibrator_ckpt", p));
    }
    let input_paths: Vec<&Path> = inputs.iter().map(|(_, p)| *p).collect();
    let out = Outputs::new(&common.out, &input_paths)?;
    out.manifest("eval", None, &inputs)?;
    let (clf, _) = load_network(source_ckpt, Role::Classifier)?;
    let source = load(data, SOURCE_EVAL)?;
    let target = load(data, TARGET_EVAL)?;
    let shape = source.image_shape().to_vec();
    let (cal, eps) = match calibrator_ckpt {
        Some(p) => {
            let (net, attrs) = load_network(p, Role::Calibrator)?;
            let eps = budget(epsilon, &attrs, p)?;
            (net, eps)
        }
        None => {
            let cfg = CalibratorConfig::default();
            let eps = epsilon.unwrap_or(cfg.epsilon);
            (build_calibrator(&cfg, shape[0], shape[1], shape[2], 0)?, eps)
        }
    };
    for (what, s) in [("classifier", &clf.spec.input_shape), ("calibrator", &cal.spec.input_shape)] {
        if s[..] != shape[..] {
            bail!("{what} expects {s:?} images, evaluation data is {shape:?}");
        }
    }
    let report = tradeoff_report(&clf, &cal, eps, &source, &target)?;
    out.write("tradeoff.csv", &report.to_csv())?;
    out.write("tradeoff.txt", &format!("{report}\n"))?;
    for (name, ds, c) in [
        ("confusion_source_before.csv", &source, None),
        ("confusion_source_after.csv", &source, Some((&cal, eps))),
        ("confusion_target_before.csv", &target, None),
        ("confusion_target_after.csv", &target, Some((&cal, eps))),
    ] {
        out.write(name, &confusion(&clf, c, ds)?.to_csv())?;
    }
    println!("{report}");
    Ok(())
}

fn cmd_lsweep(common: &Common, data: &Path, source_ckpt: &Path, epsilons: &[f64]) -> Result<()> {
    let cfg = load_config(common)?;
    let cfg_path = common.config.as_deref().expect("checked by load_config");
    let out = Outputs::new(&common.out, &[cfg_path, source_ckpt])?;
    out.manifest("lsweep", Some(&cfg), &[("config", cfg_path), ("data", data), ("source_ckpt", source_ckpt)])?;
    let clf = load_checkpoint_expecting(source_ckpt, &cfg.classifier_arch().spec())
        .with_context(|| format!("checkpoint {}", source_ckpt.display()))?
        .network;
    let source = load(data, SOURCE)?;
    let target = load(data, TARGET)?;
    let source_eval = load(data, SOURCE_EVAL)?;
    let target_eval = load(data, TARGET_EVAL)?;
    let run_cfg = TrainConfig { epochs: cfg.sweep_epochs, ..cfg.calibration.clone() };
    let factory = |eps: f64| cfg.build_adversarial(eps);
    let rows = lsweep(epsilons, &clf, &factory, &source, &target, &source_eval, &target_eval, &run_cfg)?;
    let csv = sweep_csv(&rows);
    out.write("sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_fft(
    common: &Common,
    data: &Path,
    calibrator_ckpt: &Path,
    epsilon: Option<f64>,
    cutoff: f64,
    count: usize,
) -> Result<()> {
    let out = Outputs::new(&common.out, &[calibrator_ckpt])?;
    out.manifest("fft", None, &[("data", data), ("calibrator_ckpt", calibrator_ckpt)])?;
    let (cal, attrs) = load_network(calibrator_ckpt, Role::Calibrator)?;
    let eps = budget(epsilon, &attrs, calibrator_ckpt)?;
    let target = load(data, TARGET_EVAL)?;
    let n = count.min(target.len());
    if n == 0 {
        bail!("--count must be positive");
    }
    let images = target.images().slice_outer(0, n)?;
    let calibrated = calibrate_batch(&cal, &images, eps, 256)?;
    let before = high_freq_ratios(&images, cutoff)?;
    let after = high_freq_ratios(&calibrated, cutoff)?;
    let mut csv = String::from("index,hf_before,hf_after\n");
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        let _ = writeln!(csv, "{i},{b:.6},{a:.6}");
    }
    out.write("fft.csv", &csv)?;
    let first = |t: &calibra_core::Tensor| t.slice_outer(0, 1)?.reshape(&t.shape()[1..]);
    write_spectrum_pgm(&fft_spectrum(&first(&images)?)?, 0, out.path("spectrum_before.pgm")?)?;
    write_spectrum_pgm(&fft_spectrum(&first(&calibrated)?)?, 0, out.path("spectrum_after.pgm")?)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "high-frequency energy ratio (cutoff {cutoff}) over {n} target images: before {:.4}, after {:.4}",
        mean(&before),
        mean(&after)
    );
    Ok(())
}
