//! Accuracy, confusion matrices, segmentation metrics, trade-off reports
//! and Fourier diagnostics.
//!
//! Evaluation is the only place allowed to look at target labels.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{calibrate_batch, Network};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// Default low-pass radius as a fraction of `min(H, W)`.
pub const DEFAULT_CUTOFF: f64 = 0.25;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for a batch, optionally through a calibrator with
/// budget `epsilon`.
pub fn predict(
    classifier: &Network,
    calibrator: Option<(&Network, f64)>,
    images: &Tensor,
) -> Result<Vec<usize>> {
    let logits = match calibrator {
        Some((cal, eps)) => classifier.eval(&calibrate_batch(cal, images, eps, CHUNK)?, CHUNK)?,
        None => classifier.eval(images, CHUNK)?,
    };
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(argmax).collect())
}

fn labels_of(dataset: &DomainDataset) -> Result<Vec<usize>> {
    Ok(dataset.eval_labels()?.iter().map(|&l| l as usize).collect())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(
    classifier: &Network,
    calibrator: Option<(&Network, f64)>,
    dataset: &DomainDataset,
) -> Result<f64> {
    let labels = labels_of(dataset)?;
    let pred = predict(classifier, calibrator, dataset.images())?;
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Counts with rows indexed by true class and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for a {classes}x{classes} confusion matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::ClassOutOfRange { index: t.max(p), classes });
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Header `true\pred,0,1,…` then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.classes {
            s.push_str(&format!(",{j}"));
        }
        s.push('\n');
        for i in 0..self.classes {
            s.push_str(&i.to_string());
            for j in 0..self.classes {
                s.push_str(&format!(",{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(
    classifier: &Network,
    calibrator: Option<(&Network, f64)>,
    dataset: &DomainDataset,
) -> Result<ConfusionMatrix> {
    let labels = labels_of(dataset)?;
    let pred = predict(classifier, calibrator, dataset.images())?;
    let classes = classifier.spec.output_shape()?[0];
    ConfusionMatrix::from_predictions(classes, &labels, &pred)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// Per-class IoU; `None` when the class is absent from both truth and
    /// predictions.
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub freq_weighted_iou: f64,
    pub pixel_accuracy: f64,
}

/// mIoU over classes present in truth or predictions, fwIoU weighted by
/// true-class frequency, and overall pixel accuracy.
pub fn seg_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    if cm.classes() < 2 {
        return Err(Error::InvalidArgument("segmentation metrics need at least 2 classes".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let iou: Vec<Option<f64>> = (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k);
            let union = cm.row_sum(k) + cm.col_sum(k) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let mean_iou = present.iter().sum::<f64>() / present.len() as f64;
    let freq_weighted_iou = iou
        .iter()
        .enumerate()
        .map(|(k, v)| v.map_or(0.0, |v| cm.row_sum(k) as f64 / total as f64 * v))
        .sum();
    Ok(SegMetrics { iou, mean_iou, freq_weighted_iou, pixel_accuracy: cm.accuracy() })
}

/// Centre-shifted magnitude of the per-channel 2-D DFT of a `C×H×W` image.
pub fn fft_spectrum(image: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("spectrum needs C×H×W, got {:?}", image.shape())));
    };
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("spectrum needs H, W >= 2, got {h}x{w}")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in image.data().chunks(h * w) {
        let mut buf: Vec<Complex<f64>> = ch.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        for i in 0..h {
            for j in 0..w {
                out.push(buf[((i + h - h / 2) % h) * w + (j + w - w / 2) % w].norm());
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Share of spectral energy strictly outside the centred disk of radius
/// `cutoff · min(H, W)`. An all-zero spectrum has ratio 0.
pub fn high_freq_energy_ratio(spectrum: &Tensor, cutoff: f64) -> Result<f64> {
    let &[_, h, w] = spectrum.shape() else {
        return Err(Error::Shape(format!("spectrum must be C×H×W, got {:?}", spectrum.shape())));
    };
    if !(cutoff >= 0.0 && cutoff.is_finite()) {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff} must be non-negative")));
    }
    let radius = cutoff * h.min(w) as f64;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let (mut total, mut high) = (0.0, 0.0);
    for ch in spectrum.data().chunks(h * w) {
        for (k, &m) in ch.iter().enumerate() {
            let e = m * m;
            total += e;
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            if ((i - cy).powi(2) + (j - cx).powi(2)).sqrt() > radius {
                high += e;
            }
        }
    }
    Ok(if total > 0.0 { high / total } else { 0.0 })
}

/// Per-image high-frequency ratio over an `N×C×H×W` batch.
pub fn high_freq_ratios(images: &Tensor, cutoff: f64) -> Result<Vec<f64>> {
    if images.rank() != 4 {
        return Err(Error::Shape(format!("expected NCHW batch, got {:?}", images.shape())));
    }
    (0..images.shape()[0])
        .map(|i| {
            let img = images.slice_outer(i, i + 1)?.reshape(&images.shape()[1..])?;
            high_freq_energy_ratio(&fft_spectrum(&img)?, cutoff)
        })
        .collect()
}

/// Writes one channel of a spectrum as a binary PGM, log-scaled to 0..255.
pub fn write_spectrum_pgm(spectrum: &Tensor, channel: usize, path: impl AsRef<Path>) -> Result<()> {
    let &[c, h, w] = spectrum.shape() else {
        return Err(Error::Shape(format!("spectrum must be C×H×W, got {:?}", spectrum.shape())));
    };
    if channel >= c {
        return Err(Error::InvalidArgument(format!("channel {channel} of {c}")));
    }
    let plane = &spectrum.data()[channel * h * w..(channel + 1) * h * w];
    let logged: Vec<f64> = plane.iter().map(|m| m.ln_1p()).collect();
    let top = logged.iter().copied().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(logged.iter().map(|v| if top > 0.0 { (v / top * 255.0).round() as u8 } else { 0 }));
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Source and target accuracy without and with the calibrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffReport {
    pub source_before: f64,
    pub source_after: f64,
    pub target_before: f64,
    pub target_after: f64,
    /// Calibrator parameters over classifier parameters.
    pub param_ratio: f64,
}

impl TradeoffReport {
    pub fn source_delta(&self) -> f64 {
        self.source_after - self.source_before
    }

    pub fn target_delta(&self) -> f64 {
        self.target_after - self.target_before
    }

    pub fn to_csv(&self) -> String {
        format!(
            "source_before,source_after,source_delta,target_before,target_after,target_delta,param_ratio\n\
             {:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.source_before,
            self.source_after,
            self.source_delta(),
            self.target_before,
            self.target_after,
            self.target_delta(),
            self.param_ratio
        )
    }
}

impl fmt::Display for TradeoffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "domain   before   after    delta")?;
        writeln!(
            f,
            "source   {:6.2}%  {:6.2}%  {:+6.2}",
            100.0 * self.source_before,
            100.0 * self.source_after,
            100.0 * self.source_delta()
        )?;
        writeln!(
            f,
            "target   {:6.2}%  {:6.2}%  {:+6.2}",
            100.0 * self.target_before,
            100.0 * self.target_after,
            100.0 * self.target_delta()
        )?;
        write!(f, "calibrator/classifier parameters: {:.3}%", 100.0 * self.param_ratio)
    }
}

pub fn tradeoff_report(
    classifier: &Network,
    calibrator: &Network,
    epsilon: f64,
    source_eval: &DomainDataset,
    target_eval: &DomainDataset,
) -> Result<TradeoffReport> {
    Ok(TradeoffReport {
        source_before: accuracy(classifier, None, source_eval)?,
        source_after: accuracy(classifier, Some((calibrator, epsilon)), source_eval)?,
        target_before: accuracy(classifier, None, target_eval)?,
        target_after: accuracy(classifier, Some((calibrator, epsilon)), target_eval)?,
        param_ratio: calibrator.count_parameters() as f64 / classifier.count_parameters() as f64,
    })
}
