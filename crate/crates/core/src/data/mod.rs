//! Datasets, normalisation, batching and the pixel-discriminator patch
//! transform.

mod dataset;
mod generate;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{load_dataset, save_dataset, Domain, DomainDataset};
pub use generate::{
    generate_domain_pair, generate_split, GeneratorConfig, ShiftConfig, Texture, MAX_CLASSES,
};

pub(crate) fn normalize_value(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Maps raw pixels in `[0, 1]` to `[-1, 1]` via `2x − 1`.
pub fn normalize(raw: &Tensor) -> Result<Tensor> {
    if let Some(v) = raw.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("raw pixel {v} outside [0, 1]")));
    }
    Ok(raw.map(normalize_value))
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("normalised pixel {v} outside [-1, 1]")));
    }
    Ok(x.map(|v| (v + 1.0) / 2.0))
}

/// Flat source indices, within one `C×H×W` image, of a random
/// `patch × patch` window whose spatial positions are randomly permuted.
/// The same permutation is used for every channel; the output is
/// channel-major.
pub fn patch_shuffle_indices<R: Rng + ?Sized>(
    shape: &[usize],
    patch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let &[c, h, w] = shape else {
        return Err(Error::Shape(format!("patch sampling needs C×H×W, got {shape:?}")));
    };
    if patch == 0 || patch > h.min(w) {
        return Err(Error::InvalidArgument(format!("patch {patch} does not fit image {h}x{w}")));
    }
    let top = rng.gen_range(0..=h - patch);
    let left = rng.gen_range(0..=w - patch);
    let mut positions: Vec<usize> = (0..patch * patch)
        .map(|k| (top + k / patch) * w + left + k % patch)
        .collect();
    positions.shuffle(rng);
    Ok((0..c).flat_map(|ch| positions.iter().map(move |&p| ch * h * w + p)).collect())
}

/// Random patch of `image`, spatially shuffled and flattened to
/// `C·patch·patch` values.
pub fn sample_patch_and_shuffle<R: Rng + ?Sized>(
    image: &Tensor,
    patch: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let idx = patch_shuffle_indices(image.shape(), patch, rng)?;
    Ok(Tensor::from_vec(idx.iter().map(|&i| image.data()[i]).collect()))
}

/// Gather indices over a whole `N×C×H×W` batch (one fresh patch and
/// permutation per image), laid out as `N × C·patch·patch`.
pub fn batch_patch_indices<R: Rng + ?Sized>(
    batch_shape: &[usize],
    patch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_shape.len() != 4 {
        return Err(Error::Shape(format!("expected NCHW batch, got {batch_shape:?}")));
    }
    let per: usize = batch_shape[1..].iter().product();
    let mut out = Vec::new();
    for n in 0..batch_shape[0] {
        out.extend(patch_shuffle_indices(&batch_shape[1..], patch, rng)?.into_iter().map(|i| n * per + i));
    }
    Ok(out)
}

/// One epoch of row indices: a random permutation cut into batches of
/// `batch_size`, keeping the short final batch.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    /// Present only when the dataset's labels are visible.
    pub labels: Option<Vec<usize>>,
}

pub fn make_batches<R: Rng + ?Sized>(
    dataset: &DomainDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    let labels = if dataset.labels_visible() { Some(dataset.labels()?) } else { None };
    batch_indices(dataset.len(), batch_size, rng)?
        .into_iter()
        .map(|idx| {
            Ok(Batch {
                images: dataset.images().select_outer(&idx)?,
                labels: labels.map(|l| idx.iter().map(|&i| l[i] as usize).collect()),
                indices: idx,
            })
        })
        .collect()
}
