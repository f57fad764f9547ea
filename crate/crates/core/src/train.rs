//! Supervised source training and the adversarial calibration loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::{batch_indices, batch_patch_indices, make_batches, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy, argmax};
use crate::losses::{
    alignment_diagnostic, calibrator_loss, discriminator_loss, source_loss, AlignmentReport,
    CalibratorTerms, GroupLabel, GroupLogits,
};
use crate::nets::{calibrate, check_epsilon, Binding, Network};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

/// How the returned calibrator is chosen among end-of-epoch snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Keep the final parameters.
    Last,
    /// Highest feature-discriminator confusion among snapshots whose
    /// calibrated source validation accuracy stays within
    /// `source_tolerance` of the uncalibrated accuracy; if none does, the
    /// snapshot with the best source accuracy.
    Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub disc_steps_per_cal_step: usize,
    pub epsilon: f64,
    pub patch_size: usize,
    pub seed: u64,
    /// Record alignment distances every this many steps.
    pub log_every: usize,
    pub selection: Selection,
    pub source_tolerance: f64,
    /// Source rows used for selection scores.
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            disc_steps_per_cal_step: 1,
            epsilon: 0.2,
            patch_size: 8,
            seed: 0,
            log_every: 50,
            selection: Selection::Confusion,
            source_tolerance: 0.01,
            validation_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("disc_steps_per_cal_step", self.disc_steps_per_cal_step),
            ("patch_size", self.patch_size),
            ("log_every", self.log_every),
            ("validation_size", self.validation_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.source_tolerance.is_nan() || self.source_tolerance < 0.0 {
            return Err(Error::InvalidArgument("source tolerance must be non-negative".into()));
        }
        check_epsilon(self.epsilon)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub source_loss: Option<f64>,
    pub feat_disc_loss: Option<f64>,
    pub pixel_disc_loss: Option<f64>,
    pub calibrator_loss: Option<f64>,
    pub alignment: Option<AlignmentReport>,
}

impl StepRecord {
    fn new(step: u64, epoch: usize) -> Self {
        Self {
            step,
            epoch,
            source_loss: None,
            feat_disc_loss: None,
            pixel_disc_loss: None,
            calibrator_loss: None,
            alignment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training accuracy for source runs; calibrated validation accuracy
    /// for calibration runs.
    pub source_acc: f64,
    /// Only filled by an external monitor; never used for selection.
    pub target_acc: Option<f64>,
    /// Mean feature-discriminator probability of "source" on calibrated
    /// target samples.
    pub confusion: Option<f64>,
}

/// Append-only training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub selected_epoch: Option<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl RunLog {
    pub fn push_step(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if r.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "step {} does not follow {}",
                    r.step, last.step
                )));
            }
        }
        self.steps.push(r);
        Ok(())
    }

    pub fn push_epoch(&mut self, r: EpochRecord) {
        self.epochs.push(r);
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    /// One row per step: losses then the four alignment distances.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from(
            "step,epoch,l_source,l_feat_d,l_pix_d,l_cal,\
             align_pix_target,align_pix_source,align_feat_target,align_feat_source\n",
        );
        for r in &self.steps {
            let a = r.alignment.map(|a| a.as_array());
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                r.epoch,
                opt(r.source_loss),
                opt(r.feat_disc_loss),
                opt(r.pixel_disc_loss),
                opt(r.calibrator_loss)
            );
            for k in 0..4 {
                let _ = write!(s, ",{}", opt(a.map(|a| a[k])));
            }
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,source_acc,target_acc,confusion,selected\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{}",
                r.epoch,
                r.source_acc,
                opt(r.target_acc),
                opt(r.confusion),
                u8::from(self.selected_epoch == Some(r.epoch))
            );
        }
        s
    }
}

/// Adam on the source cross-entropy. The classifier is updated in place.
pub fn train_source(classifier: &mut Network, source: &DomainDataset, cfg: &TrainConfig) -> Result<RunLog> {
    cfg.validate()?;
    if !source.labels_visible() || !source.has_labels() {
        return Err(Error::InvalidArgument("source training needs a labelled dataset".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam());
    let mut log = RunLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut correct, mut seen) = (0usize, 0usize);
        for batch in make_batches(source, cfg.batch_size, &mut rng)? {
            let labels = batch.labels.expect("visible labels");
            let mut tape = Tape::new();
            let bound = classifier.bind(&mut tape, true);
            let x = tape.constant(batch.images);
            let logits = classifier.forward(&mut tape, &bound, x)?;
            let loss = source_loss(&mut tape, logits, &labels)?;
            let k = tape.value(logits).shape()[1];
            correct += tape
                .value(logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            seen += labels.len();
            let grads = bound.grads(&tape.backward(loss)?);
            classifier.params.apply_adam(&mut adam, &grads)?;
            step += 1;
            let mut rec = StepRecord::new(step, epoch);
            rec.source_loss = Some(tape.value(loss).item());
            log.push_step(rec)?;
        }
        log.push_epoch(EpochRecord {
            epoch,
            source_acc: correct as f64 / seen as f64,
            target_acc: None,
            confusion: None,
        });
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Endless stream of shuffled batches over `n` rows.
struct BatchStream {
    n: usize,
    size: usize,
    queue: Vec<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, size: usize) -> Self {
        Self { n, size, queue: Vec::new() }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue = batch_indices(self.n, self.size, rng)?;
            self.queue.reverse();
        }
        Ok(self.queue.pop().expect("refilled"))
    }
}

/// Shuffled-patch view of `images` fed to the pixel discriminator.
fn pixel_logits(
    tape: &mut Tape,
    d_pixel: &Network,
    bound: &Binding,
    images: Var,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = tape.value(images).shape().to_vec();
    let idx = batch_patch_indices(&shape, patch, rng)?;
    let cols = shape[1] * patch * patch;
    let view = tape.gather(images, idx, &[shape[0], cols])?;
    d_pixel.forward(tape, bound, view)
}

fn check_calibration_inputs(
    classifier: &Network,
    calibrator: &Network,
    d_pixel: &Network,
    d_feat: &Network,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if !classifier.params.is_frozen() {
        return Err(Error::InvalidArgument(
            "calibrator training requires a frozen classifier".into(),
        ));
    }
    if target.labels_visible() {
        return Err(Error::InvalidArgument("target labels must be hidden during calibration".into()));
    }
    if !source.labels_visible() {
        return Err(Error::InvalidArgument("source labels must be visible for model selection".into()));
    }
    if source.image_shape() != target.image_shape() {
        return Err(Error::Shape(format!(
            "source images {:?} vs target images {:?}",
            source.image_shape(),
            target.image_shape()
        )));
    }
    if calibrator.spec.input_shape != source.image_shape() {
        return Err(Error::Shape(format!(
            "calibrator expects {:?}, data is {:?}",
            calibrator.spec.input_shape,
            source.image_shape()
        )));
    }
    let c = source.image_shape()[0];
    let pix_dim = c * cfg.patch_size * cfg.patch_size;
    if d_pixel.spec.input_shape != [pix_dim] {
        return Err(Error::Shape(format!(
            "pixel discriminator expects {:?}, patches have {pix_dim} values",
            d_pixel.spec.input_shape
        )));
    }
    let feat_dim = classifier.spec.feature_dim()?;
    if d_feat.spec.input_shape != [feat_dim] {
        return Err(Error::Shape(format!(
            "feature discriminator expects {:?}, classifier features have {feat_dim}",
            d_feat.spec.input_shape
        )));
    }
    Ok(())
}

/// Mean softmax probability of the source group under `d_feat` for
/// calibrated target features.
fn feature_confusion(d_feat: &Network, features: &Tensor) -> Result<f64> {
    let logits = d_feat.eval(features, 256)?;
    let probs = crate::ops::softmax(&logits);
    let k = probs.shape()[1];
    let rows = probs.shape()[0];
    Ok(probs.data().chunks(k).map(|r| r[GroupLabel::Source.index()]).sum::<f64>() / rows as f64)
}

pub type TargetMonitor<'a> = &'a dyn Fn(&Network) -> Result<f64>;

/// Alternating discriminator/calibrator training. Only `calibrator`,
/// `d_pixel` and `d_feat` change; the classifier must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_calibrator(
    classifier: &Network,
    calibrator: &mut Network,
    d_pixel: &mut Network,
    d_feat: &mut Network,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
    monitor: Option<TargetMonitor<'_>>,
) -> Result<RunLog> {
    check_calibration_inputs(classifier, calibrator, d_pixel, d_feat, source, target, cfg)?;
    let start = Instant::now();
    let eps = cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Frozen-classifier features of the raw images never change.
    let src_feat = classifier.eval_features(source.images(), 256)?;
    let tgt_feat = classifier.eval_features(target.images(), 256)?;

    let val_n = cfg.validation_size.min(source.len());
    let val_idx: Vec<usize> = (0..val_n).map(|i| i * source.len() / val_n).collect();
    let validation = source.subset(&val_idx)?;
    let baseline_acc = accuracy(classifier, None, &validation)?;
    let conf_n = cfg.validation_size.min(target.len());
    let conf_idx: Vec<usize> = (0..conf_n).map(|i| i * target.len() / conf_n).collect();
    let conf_images = target.images().select_outer(&conf_idx)?;

    let mut cal_adam = AdamState::new(cfg.adam());
    let mut pix_adam = AdamState::new(cfg.adam());
    let mut feat_adam = AdamState::new(cfg.adam());
    let mut src_stream = BatchStream::new(source.len(), cfg.batch_size);
    let mut tgt_stream = BatchStream::new(target.len(), cfg.batch_size);
    let iters = source.len().max(target.len()).div_ceil(cfg.batch_size);

    let mut log = RunLog::default();
    let mut best: Option<((u8, f64), usize, Network)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for _ in 0..iters {
            step += 1;
            let cal_step = step.is_multiple_of(cfg.disc_steps_per_cal_step as u64);
            let si = src_stream.next(&mut rng)?;
            let ti = tgt_stream.next(&mut rng)?;
            let xs_t = source.images().select_outer(&si)?;
            let xt_t = target.images().select_outer(&ti)?;

            // (a) group batches; the calibrated ones stay on `tape` so the
            // calibrator step can differentiate through them.
            let mut tape = Tape::new();
            let cal_bound = calibrator.bind(&mut tape, cal_step);
            let clf_bound = classifier.bind(&mut tape, false);
            let xs = tape.constant(xs_t.clone());
            let xt = tape.constant(xt_t.clone());
            let cs = calibrate(&mut tape, calibrator, &cal_bound, xs, eps)?;
            let ct = calibrate(&mut tape, calibrator, &cal_bound, xt, eps)?;
            let fcs = classifier.features(&mut tape, &clf_bound, cs)?;
            let fct = classifier.features(&mut tape, &clf_bound, ct)?;

            // (b) discriminator step on detached copies.
            let mut dtape = Tape::new();
            let pix_bound = d_pixel.bind(&mut dtape, true);
            let feat_bound = d_feat.bind(&mut dtape, true);
            let images = [xs_t, xt_t, tape.value(cs).clone(), tape.value(ct).clone()];
            let feats = [
                src_feat.select_outer(&si)?,
                tgt_feat.select_outer(&ti)?,
                tape.value(fcs).clone(),
                tape.value(fct).clone(),
            ];
            let mut pix_groups = Vec::with_capacity(4);
            let mut feat_groups = Vec::with_capacity(4);
            for ((label, img), feat) in GroupLabel::ALL.into_iter().zip(images).zip(feats) {
                let iv = dtape.constant(img);
                let fv = dtape.constant(feat);
                let pl = pixel_logits(&mut dtape, d_pixel, &pix_bound, iv, cfg.patch_size, &mut rng)?;
                let fl = d_feat.forward(&mut dtape, &feat_bound, fv)?;
                pix_groups.push(GroupLogits { label, logits: pl });
                feat_groups.push(GroupLogits { label, logits: fl });
            }
            let l_pix = discriminator_loss(&mut dtape, &pix_groups)?;
            let l_feat = discriminator_loss(&mut dtape, &feat_groups)?;
            let l_d = dtape.add(l_pix, l_feat)?;
            let g = dtape.backward(l_d)?;
            d_pixel.params.apply_adam(&mut pix_adam, &pix_bound.grads(&g))?;
            d_feat.params.apply_adam(&mut feat_adam, &feat_bound.grads(&g))?;

            let mut rec = StepRecord::new(step, epoch);
            rec.pixel_disc_loss = Some(dtape.value(l_pix).item());
            rec.feat_disc_loss = Some(dtape.value(l_feat).item());

            // (c) calibrator step against the updated discriminators.
            if cal_step {
                let pix_c = d_pixel.bind(&mut tape, false);
                let feat_c = d_feat.bind(&mut tape, false);
                let terms = CalibratorTerms {
                    feat_calibrated_source: d_feat.forward(&mut tape, &feat_c, fcs)?,
                    feat_calibrated_target: d_feat.forward(&mut tape, &feat_c, fct)?,
                    pixel_calibrated_source: pixel_logits(
                        &mut tape, d_pixel, &pix_c, cs, cfg.patch_size, &mut rng,
                    )?,
                    pixel_calibrated_target: pixel_logits(
                        &mut tape, d_pixel, &pix_c, ct, cfg.patch_size, &mut rng,
                    )?,
                };
                let l_cal = calibrator_loss(&mut tape, &terms)?;
                let g = tape.backward(l_cal)?;
                calibrator.params.apply_adam(&mut cal_adam, &cal_bound.grads(&g))?;
                rec.calibrator_loss = Some(tape.value(l_cal).item());
            }
            if step.is_multiple_of(cfg.log_every as u64) {
                let xs_b = source.images().select_outer(&si)?;
                let xt_b = target.images().select_outer(&ti)?;
                rec.alignment = Some(alignment_diagnostic(classifier, calibrator, eps, &xs_b, &xt_b)?);
            }
            log.push_step(rec)?;
        }

        let source_acc = accuracy(classifier, Some((calibrator, eps)), &validation)?;
        let cal_feats = classifier
            .eval_features(&crate::nets::calibrate_batch(calibrator, &conf_images, eps, 256)?, 256)?;
        let confusion = feature_confusion(d_feat, &cal_feats)?;
        let target_acc = monitor.map(|m| m(calibrator)).transpose()?;
        log.push_epoch(EpochRecord { epoch, source_acc, target_acc, confusion: Some(confusion) });
        // Within tolerance, rank by confusion; otherwise by source
        // accuracy. Any in-tolerance snapshot beats every other one.
        let key = if source_acc >= baseline_acc - cfg.source_tolerance {
            (1, confusion)
        } else {
            (0, source_acc)
        };
        if best.as_ref().is_none_or(|(k, _, _)| key >= *k) {
            best = Some((key, epoch, calibrator.clone()));
        }
    }
    match (cfg.selection, best) {
        (Selection::Confusion, Some((_, epoch, net))) => {
            *calibrator = net;
            log.selected_epoch = Some(epoch);
        }
        _ => log.selected_epoch = Some(cfg.epochs - 1),
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// One row of an ε sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub source_acc: f64,
    pub target_acc: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("epsilon,source_acc,target_acc\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.epsilon, r.source_acc, r.target_acc);
    }
    s
}

/// Fresh calibrator, pixel and feature discriminators for one run with
/// the given budget; called once per sweep point so every run starts
/// from the same seeds.
pub type Factory<'a> = &'a dyn Fn(f64) -> Result<(Network, Network, Network)>;

/// Independent calibration runs, one per ε, evaluated on labelled
/// held-out sets.
#[allow(clippy::too_many_arguments)]
pub fn lsweep(
    epsilons: &[f64],
    classifier: &Network,
    factory: Factory<'_>,
    source: &DomainDataset,
    target: &DomainDataset,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let runs = lsweep_calibrators(epsilons, classifier, factory, source, target, source_eval, target_eval, cfg)?;
    Ok(runs.into_iter().map(|(row, _)| row).collect())
}

/// [`lsweep`], also returning each trained calibrator.
#[allow(clippy::too_many_arguments)]
pub fn lsweep_calibrators(
    epsilons: &[f64],
    classifier: &Network,
    factory: Factory<'_>,
    source: &DomainDataset,
    target: &DomainDataset,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<Vec<(SweepRow, Network)>> {
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("epsilon sweep needs at least one value".into()));
    }
    if epsilons.len() < 2 {
        return Err(Error::InvalidArgument("epsilon sweep needs at least two values".into()));
    }
    for &e in epsilons {
        check_epsilon(e)?;
    }
    epsilons
        .iter()
        .map(|&epsilon| {
            let (mut cal, mut dp, mut df) = factory(epsilon)?;
            let run_cfg = TrainConfig { epsilon, ..cfg.clone() };
            train_calibrator(classifier, &mut cal, &mut dp, &mut df, source, target, &run_cfg, None)?;
            let row = SweepRow {
                epsilon,
                source_acc: accuracy(classifier, Some((&cal, epsilon)), source_eval)?,
                target_acc: accuracy(classifier, Some((&cal, epsilon)), target_eval)?,
            };
            Ok((row, cal))
        })
        .collect()
}
