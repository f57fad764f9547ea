//! Training losses and the alignment diagnostic.
//!
//! Discriminators classify inputs into four groups, always encoded in this
//! order: source images, target images, calibrated source, calibrated
//! target.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{calibrate_batch, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupLabel {
    Source,
    Target,
    CalibratedSource,
    CalibratedTarget,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 4] = [
        GroupLabel::Source,
        GroupLabel::Target,
        GroupLabel::CalibratedSource,
        GroupLabel::CalibratedTarget,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Discriminator logits for one homogeneous group batch.
#[derive(Debug, Clone, Copy)]
pub struct GroupLogits {
    pub label: GroupLabel,
    pub logits: Var,
}

/// Mean categorical cross-entropy of classifier logits.
pub fn source_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

fn group_ce(tape: &mut Tape, logits: Var, label: GroupLabel) -> Result<Var> {
    let rows = tape.value(logits).shape()[0];
    tape.cross_entropy(logits, &vec![label.index(); rows])
}

/// Σ over the four groups of the mean cross-entropy against each group's
/// own label. Every group must appear exactly once.
pub fn discriminator_loss(tape: &mut Tape, groups: &[GroupLogits]) -> Result<Var> {
    for g in GroupLabel::ALL {
        let n = groups.iter().filter(|x| x.label == g).count();
        if n != 1 {
            return Err(Error::InvalidArgument(format!(
                "discriminator loss needs group {g:?} exactly once, got {n}"
            )));
        }
    }
    let mut terms = Vec::with_capacity(4);
    for g in groups {
        terms.push(group_ce(tape, g.logits, g.label)?);
    }
    tape.add_all(&terms)
}

/// The calibrator's four fooling terms: feature- and pixel-discriminator
/// logits on calibrated source and calibrated target inputs.
#[derive(Debug, Clone, Copy)]
pub struct CalibratorTerms {
    pub feat_calibrated_source: Var,
    pub feat_calibrated_target: Var,
    pub pixel_calibrated_source: Var,
    pub pixel_calibrated_target: Var,
}

/// Σ of four mean cross-entropies, each against the source group.
pub fn calibrator_loss(tape: &mut Tape, terms: &CalibratorTerms) -> Result<Var> {
    let mut parts = Vec::with_capacity(4);
    for v in [
        terms.feat_calibrated_source,
        terms.feat_calibrated_target,
        terms.pixel_calibrated_source,
        terms.pixel_calibrated_target,
    ] {
        parts.push(group_ce(tape, v, GroupLabel::Source)?);
    }
    tape.add_all(&parts)
}

/// Batch-mean distances tracking the four alignment targets. Monitoring
/// only; nothing optimises these directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    /// ‖mean(Xs) − mean(Gc(Xt))‖₂ over pixels.
    pub pixel_target: f64,
    /// ‖mean(Xs) − mean(Gc(Xs))‖₂ over pixels.
    pub pixel_source: f64,
    /// ‖mean(Ms(Xs)) − mean(Ms(Gc(Xt)))‖₂ over features.
    pub feature_target: f64,
    /// ‖mean(Ms(Xs)) − mean(Ms(Gc(Xs)))‖₂ over features.
    pub feature_source: f64,
}

impl AlignmentReport {
    pub fn as_array(&self) -> [f64; 4] {
        [self.pixel_target, self.pixel_source, self.feature_target, self.feature_source]
    }
}

fn row_mean(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let d = x.numel() / n;
    let mut m = vec![0.0; d];
    for row in x.data().chunks(d) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    m
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn alignment_diagnostic(
    classifier: &Network,
    calibrator: &Network,
    epsilon: f64,
    source: &Tensor,
    target: &Tensor,
) -> Result<AlignmentReport> {
    if source.shape()[0] == 0 || target.shape()[0] == 0 {
        return Err(Error::InvalidArgument("alignment diagnostic needs non-empty batches".into()));
    }
    const CHUNK: usize = 256;
    let cal_s = calibrate_batch(calibrator, source, epsilon, CHUNK)?;
    let cal_t = calibrate_batch(calibrator, target, epsilon, CHUNK)?;
    let xs = row_mean(source);
    let fs = row_mean(&classifier.eval_features(source, CHUNK)?);
    Ok(AlignmentReport {
        pixel_target: l2(&xs, &row_mean(&cal_t)),
        pixel_source: l2(&xs, &row_mean(&cal_s)),
        feature_target: l2(&fs, &row_mean(&classifier.eval_features(&cal_t, CHUNK)?)),
        feature_source: l2(&fs, &row_mean(&classifier.eval_features(&cal_s, CHUNK)?)),
    })
}
