//! Procedural two-domain glyph datasets.
//!
//! Every class is a fixed set of strokes (seven-segment digits first, then
//! diagonal patterns). Each sample is rendered anti-aliased with random
//! rotation, scale, translation and stroke width. The target domain
//! renders its own independent samples and then applies the configured
//! shifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{Domain, DomainDataset};
use super::normalize_value;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type Point = (f64, f64);

const TL: Point = (0.32, 0.2);
const TR: Point = (0.68, 0.2);
const ML: Point = (0.32, 0.5);
const MR: Point = (0.68, 0.5);
const BL: Point = (0.32, 0.8);
const BR: Point = (0.68, 0.8);
const TC: Point = (0.5, 0.2);
const BC: Point = (0.5, 0.8);

const SEG_A: (Point, Point) = (TL, TR);
const SEG_B: (Point, Point) = (TR, MR);
const SEG_C: (Point, Point) = (MR, BR);
const SEG_D: (Point, Point) = (BL, BR);
const SEG_E: (Point, Point) = (ML, BL);
const SEG_F: (Point, Point) = (TL, ML);
const SEG_G: (Point, Point) = (ML, MR);

/// Stroke templates in unit coordinates (x right, y down).
fn templates() -> Vec<Vec<(Point, Point)>> {
    vec![
        vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F],
        vec![SEG_B, SEG_C],
        vec![SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        vec![SEG_A, SEG_B, SEG_G, SEG_C, SEG_D],
        vec![SEG_F, SEG_G, SEG_B, SEG_C],
        vec![SEG_A, SEG_F, SEG_G, SEG_C, SEG_D],
        vec![SEG_A, SEG_F, SEG_G, SEG_E, SEG_D, SEG_C],
        vec![SEG_A, SEG_B, SEG_C],
        vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        vec![SEG_A, SEG_B, SEG_F, SEG_G, SEG_C, SEG_D],
        vec![(TL, BR), (TR, BL)],
        vec![(TC, BC), SEG_G],
        vec![(TL, BR), SEG_A, SEG_D],
        vec![(TC, BL), (TC, BR), SEG_G],
    ]
}

pub const MAX_CLASSES: usize = 14;

/// Periodic additive pattern `A·cos(2πf·x + φx)·cos(2πf·y + φy)` in
/// normalised units; `frequency` is in cycles per pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShiftConfig {
    pub contrast_inversion: bool,
    pub additive_texture: Option<Texture>,
    /// Per-channel offset in normalised units.
    pub channel_bias: Option<Vec<f64>>,
    /// Amplitude (unit coordinates) of a smooth random warp applied while
    /// rendering.
    pub elastic_jitter: Option<f64>,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        !self.contrast_inversion
            && self.additive_texture.is_none()
            && self.channel_bias.is_none()
            && self.elastic_jitter.is_none()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if let Some(t) = self.additive_texture {
            if !(t.frequency > 0.0 && t.frequency <= 0.5) || !(0.0..=1.0).contains(&t.amplitude) {
                return Err(Error::InvalidArgument(format!(
                    "texture frequency must be in (0, 0.5] and amplitude in [0, 1], got {t:?}"
                )));
            }
        }
        if let Some(b) = &self.channel_bias {
            if b.len() != channels || b.iter().any(|v| v.abs() > 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "channel bias needs {channels} offsets in [-1, 1], got {b:?}"
                )));
            }
        }
        if let Some(j) = self.elastic_jitter {
            if !(0.0..=0.2).contains(&j) {
                return Err(Error::InvalidArgument(format!("elastic jitter {j} outside [0, 0.2]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "n_classes must be in 2..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.n_per_class == 0 || self.image_size < 8 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!("degenerate dataset size {self:?}")));
        }
        Ok(())
    }
}

fn dist_to_segment(p: Point, (a, b): (Point, Point)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Raw intensities in `[0, 1]`, one channel, `size × size`.
fn render_glyph(strokes: &[(Point, Point)], size: usize, jitter: Option<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle: f64 = rng.gen_range(-0.2..0.2);
    let scale = rng.gen_range(0.88..1.08);
    let shift = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let half_width = rng.gen_range(0.045..0.07);
    let warp = jitter.map(|amp| {
        let f: [f64; 4] = [
            rng.gen_range(1.0..2.5),
            rng.gen_range(1.0..2.5),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        (amp, f)
    });
    let (sin, cos) = angle.sin_cos();
    let px = 1.0 / size as f64;
    let soft = 0.75 * px;
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (mut x, mut y) = ((j as f64 + 0.5) * px, (i as f64 + 0.5) * px);
            if let Some((amp, f)) = warp {
                let (x0, y0) = (x, y);
                x += amp * (std::f64::consts::TAU * f[0] * y0 + f[2]).sin();
                y += amp * (std::f64::consts::TAU * f[1] * x0 + f[3]).sin();
            }
            // inverse of: rotate about the centre, scale, translate
            let (cx, cy) = (x - 0.5 - shift.0, y - 0.5 - shift.1);
            let (rx, ry) = ((cos * cx + sin * cy) / scale, (-sin * cx + cos * cy) / scale);
            let p = (rx + 0.5, ry + 0.5);
            let d = strokes.iter().map(|&s| dist_to_segment(p, s)).fold(f64::INFINITY, f64::min);
            out[i * size + j] = ((half_width - d) / soft + 0.5).clamp(0.0, 1.0);
        }
    }
    out
}

fn sample_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    let d = match domain {
        Domain::Source => 0x5EED_0001u64,
        Domain::Target => 0x5EED_0002u64,
    };
    seed ^ d.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One normalised image for sample `index` (class `index % n_classes`).
fn render_sample(
    cfg: &GeneratorConfig,
    shift: &ShiftConfig,
    domain: Domain,
    seed: u64,
    index: usize,
    glyphs: &[Vec<(Point, Point)>],
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, domain, index));
    let class = index % cfg.n_classes;
    let size = cfg.image_size;
    let jitter = if domain == Domain::Target { shift.elastic_jitter } else { None };
    let raw = render_glyph(&glyphs[class], size, jitter, &mut rng);
    let mut out = Vec::with_capacity(cfg.channels * size * size);
    let mut shift_rng =
        ChaCha8Rng::seed_from_u64(sample_seed(shift.seed, domain, index) ^ 0xA5A5_A5A5);
    let phases = (
        shift_rng.gen_range(0.0..std::f64::consts::TAU),
        shift_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for c in 0..cfg.channels {
        for (k, &r) in raw.iter().enumerate() {
            let mut v = r;
            if domain == Domain::Target && shift.contrast_inversion {
                v = 1.0 - v;
            }
            let mut v = normalize_value(v);
            if domain == Domain::Target {
                if let Some(t) = shift.additive_texture {
                    let (i, j) = ((k / size) as f64, (k % size) as f64);
                    let w = std::f64::consts::TAU * t.frequency;
                    v += t.amplitude * (w * j + phases.0).cos() * (w * i + phases.1).cos();
                }
                if let Some(b) = &shift.channel_bias {
                    v += b[c];
                }
            }
            out.push(v.clamp(-1.0, 1.0));
        }
    }
    out
}

fn render_domain(
    cfg: &GeneratorConfig,
    shift: &ShiftConfig,
    domain: Domain,
    seed: u64,
    offset: usize,
) -> Result<DomainDataset> {
    let glyphs = templates();
    let n = cfg.n_classes * cfg.n_per_class;
    let pixels: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| render_sample(cfg, shift, domain, seed, offset + i, &glyphs))
        .collect();
    let images = Tensor::new(
        vec![n, cfg.channels, cfg.image_size, cfg.image_size],
        pixels.concat(),
    )?;
    let labels = (0..n).map(|i| ((offset + i) % cfg.n_classes) as u32).collect();
    DomainDataset::new(images, Some(labels), domain, domain == Domain::Source)
}

/// Source set (labels visible) and target set (labels hidden) with the
/// same label space and identical class priors.
pub fn generate_domain_pair(
    cfg: &GeneratorConfig,
    shift: &ShiftConfig,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    generate_split(cfg, shift, seed, 0)
}

/// Like [`generate_domain_pair`] but drawing samples from index `offset`
/// on, so disjoint splits (train/test) come from the same seed.
/// `offset` must be a multiple of `n_classes` to keep classes balanced.
pub fn generate_split(
    cfg: &GeneratorConfig,
    shift: &ShiftConfig,
    seed: u64,
    offset: usize,
) -> Result<(DomainDataset, DomainDataset)> {
    cfg.validate()?;
    shift.validate(cfg.channels)?;
    if !offset.is_multiple_of(cfg.n_classes) {
        return Err(Error::InvalidArgument("split offset must be a multiple of n_classes".into()));
    }
    Ok((
        render_domain(cfg, shift, Domain::Source, seed, offset)?,
        render_domain(cfg, shift, Domain::Target, seed, offset)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig { n_classes: 10, n_per_class: 3, image_size: 16, channels: 1 }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let shift = ShiftConfig {
            contrast_inversion: true,
            additive_texture: Some(Texture { frequency: 0.4, amplitude: 0.3 }),
            seed: 5,
            ..Default::default()
        };
        let a = generate_domain_pair(&cfg(), &shift, 9).unwrap();
        let b = generate_domain_pair(&cfg(), &shift, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_domain_pair(&cfg(), &shift, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn shared_label_space_and_priors() {
        let (s, t) = generate_domain_pair(&cfg(), &ShiftConfig::none(), 1).unwrap();
        let count = |l: &[u32]| {
            let mut c = vec![0; 10];
            l.iter().for_each(|&v| c[v as usize] += 1);
            c
        };
        assert_eq!(count(s.labels().unwrap()), vec![3; 10]);
        assert_eq!(count(t.eval_labels().unwrap()), vec![3; 10]);
        assert!(!t.labels_visible());
        assert!(s.labels_visible());
    }

    #[test]
    fn pixels_stay_in_range_under_all_shifts() {
        let shift = ShiftConfig {
            contrast_inversion: true,
            additive_texture: Some(Texture { frequency: 0.5, amplitude: 1.0 }),
            channel_bias: Some(vec![0.7]),
            elastic_jitter: Some(0.05),
            seed: 3,
        };
        let (_, t) = generate_domain_pair(&cfg(), &shift, 2).unwrap();
        assert!(t.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn inversion_flips_background() {
        let shift = ShiftConfig { contrast_inversion: true, ..Default::default() };
        let (s, t) = generate_domain_pair(&cfg(), &shift, 4).unwrap();
        // corners are background
        assert_eq!(s.images().data()[0], -1.0);
        assert_eq!(t.images().data()[0], 1.0);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut c = cfg();
        c.n_classes = 1;
        assert!(generate_domain_pair(&c, &ShiftConfig::none(), 0).is_err());
        let mut c = cfg();
        c.image_size = 2;
        assert!(generate_domain_pair(&c, &ShiftConfig::none(), 0).is_err());
        let bad = ShiftConfig { channel_bias: Some(vec![0.1, 0.2]), ..Default::default() };
        assert!(generate_domain_pair(&cfg(), &bad, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_samples() {
        let (a, _) = generate_split(&cfg(), &ShiftConfig::none(), 1, 0).unwrap();
        let (b, _) = generate_split(&cfg(), &ShiftConfig::none(), 1, 30).unwrap();
        assert_ne!(a.images(), b.images());
        assert_eq!(a.labels().unwrap(), b.labels().unwrap());
    }
}
