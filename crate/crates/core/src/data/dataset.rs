//! Labelled/unlabelled image sets and the `CALD` file format.
//!
//! Layout (little-endian): magic `CALD`, version `u32`, domain tag `u8`
//! (0 source, 1 target), labels-visible flag `u8`, N, C, H, W as `u64`,
//! N labels as `u32` (`u32::MAX` marks a missing label), then the pixel
//! block as a `CALT` tensor of shape N×C×H×W.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_u32, read_u64, Tensor};

const MAGIC: &[u8; 4] = b"CALD";
const VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Images in `[-1, 1]` with optional labels.
///
/// Target-domain labels are hidden during training: [`DomainDataset::labels`]
/// refuses to hand them out while `labels_visible` is false and counts the
/// attempt, so tests can prove a training path never asked.
#[derive(Debug)]
pub struct DomainDataset {
    images: Tensor,
    labels: Option<Vec<u32>>,
    domain: Domain,
    labels_visible: bool,
    hidden_reads: AtomicUsize,
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.clone(),
            domain: self.domain,
            labels_visible: self.labels_visible,
            hidden_reads: AtomicUsize::new(self.hidden_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.labels == other.labels
            && self.domain == other.domain
            && self.labels_visible == other.labels_visible
    }
}

impl DomainDataset {
    pub fn new(
        images: Tensor,
        labels: Option<Vec<u32>>,
        domain: Domain,
        labels_visible: bool,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("dataset images must be NCHW, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
            if l.contains(&NO_LABEL) {
                return Err(Error::InvalidArgument("reserved label value".into()));
            }
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { images, labels, domain, labels_visible, hidden_reads: AtomicUsize::new(0) })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Training-side access to labels.
    pub fn labels(&self) -> Result<&[u32]> {
        if !self.labels_visible {
            self.hidden_reads.fetch_add(1, Ordering::Relaxed);
            return Err(Error::LabelsHidden(self.domain.name()));
        }
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} dataset has no labels", self.domain)))
    }

    /// Evaluation-side access; ignores visibility.
    pub(crate) fn eval_labels(&self) -> Result<&[u32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} dataset has no labels", self.domain)))
    }

    /// Number of refused [`DomainDataset::labels`] calls so far.
    pub fn hidden_label_reads(&self) -> usize {
        self.hidden_reads.load(Ordering::Relaxed)
    }

    pub fn with_labels_visible(mut self, visible: bool) -> Self {
        self.labels_visible = visible;
        self
    }

    /// Number of distinct classes, from labels when present.
    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |&m| m as usize + 1))
    }

    /// Rows `indices` as a new dataset with the same domain and visibility.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_outer(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            images,
            labels,
            domain: self.domain,
            labels_visible: self.labels_visible,
            hidden_reads: AtomicUsize::new(0),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = self.images.shape();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.domain.tag(), u8::from(self.labels_visible)])?;
        for &d in s {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(s[0] * 4);
        for i in 0..s[0] {
            let l = self.labels.as_ref().map_or(NO_LABEL, |l| l[i]);
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
        self.images.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut flags = [0u8; 2];
        read_exact(r, &mut flags)?;
        let domain = match flags[0] {
            0 => Domain::Source,
            1 => Domain::Target,
            t => return Err(Error::Format(format!("unknown domain tag {t}"))),
        };
        let labels_visible = match flags[1] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad labels-visible flag {f}"))),
        };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(r)? as usize;
        }
        if dims.iter().any(|&d| d == 0 || d > 1 << 24) {
            return Err(Error::Format(format!("implausible dataset dims {dims:?}")));
        }
        let mut raw = vec![0u8; dims[0] * 4];
        read_exact(r, &mut raw)?;
        let labels: Vec<u32> =
            raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = if labels.iter().all(|&l| l == NO_LABEL) {
            None
        } else if labels.contains(&NO_LABEL) {
            return Err(Error::Format("dataset mixes labelled and unlabelled rows".into()));
        } else {
            Some(labels)
        };
        let images = Tensor::read_from(r)?;
        if images.shape() != dims {
            return Err(Error::Format(format!(
                "header dims {dims:?} disagree with pixel block {:?}",
                images.shape()
            )));
        }
        Self::new(images, labels, domain, labels_visible).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn save_dataset(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    dataset.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let mut r = BufReader::new(File::open(path)?);
    DomainDataset::read_from(&mut r)
}
