//! The four networks: source classifier, residual calibrator, and the
//! pixel- and feature-level group discriminators.

mod checkpoint;
mod spec;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint};
pub use spec::{Layer, NetworkSpec, Role};

/// Number of discriminator groups: source, target, calibrated source,
/// calibrated target.
pub const NUM_GROUPS: usize = 4;

/// Named learnable tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: false }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.frozen {
            return Err(Error::Frozen(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Applies one Adam update. Refused, with values left untouched, when
    /// the set is frozen.
    pub fn apply_adam(&mut self, state: &mut AdamState, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("{} tensors", self.tensors.len())));
        }
        if let Some(unknown) = grads.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!("gradient for unknown parameter '{unknown}'")));
        }
        state.step(
            self.tensors
                .iter_mut()
                .filter_map(|(k, v)| grads.get(k).map(|g| (k.as_str(), v, g))),
        )
    }

    /// SHA-256 over names and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Total element count over all tensors.
pub fn count_parameters(params: &ParameterSet) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("l{layer}.w")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("l{layer}.b")
}

/// Parameters of a network placed on a tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<(Var, Var)>>,
}

impl Binding {
    /// Gradients of every bound parameter, keyed by parameter name.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .flat_map(|(i, (w, b))| [(weight_name(i), g.get(w)), (bias_name(i), g.get(b))])
            .collect()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flatten().flat_map(|&(w, b)| [w, b])
    }
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
}

impl Network {
    /// He-uniform weights, zero biases; deterministic in `seed`.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = spec.layers.iter().rposition(Layer::has_params);
        let mut params = ParameterSet::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((wshape, bshape)) = layer.param_shapes() else { continue };
            let n: usize = wshape.iter().product();
            let fan_in: usize = wshape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let w = if spec.zero_init_final && Some(i) == last {
                Tensor::zeros(&wshape)
            } else {
                Tensor::new(wshape, data)?
            };
            params.insert(weight_name(i), w)?;
            params.insert(bias_name(i), Tensor::zeros(&bshape))?;
        }
        Ok(Self { spec, params })
    }

    /// Wraps externally supplied parameters after checking them against
    /// the spec.
    pub fn from_parts(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        spec.shapes()?;
        let mut expected = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((ws, bs)) = layer.param_shapes() else { continue };
            for (name, shape) in [(weight_name(i), ws), (bias_name(i), bs)] {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => expected += 1,
                    Some(t) => {
                        return Err(Error::MalformedSpec(format!(
                            "parameter {name} has shape {:?}, spec wants {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::MalformedSpec(format!("missing parameter {name}"))),
                }
            }
        }
        if expected != params.len() {
            return Err(Error::MalformedSpec("parameter set has extra tensors".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Puts the parameters on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                layer.has_params().then(|| {
                    let w = self.params.get(&weight_name(i)).unwrap().clone();
                    let b = self.params.get(&bias_name(i)).unwrap().clone();
                    if trainable {
                        (tape.param(w), tape.param(b))
                    } else {
                        (tape.constant(w), tape.constant(b))
                    }
                })
            })
            .collect();
        Binding { vars }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "{} expects per-sample input {:?}, got batch {s:?}",
                self.spec.role, self.spec.input_shape
            )));
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape, bound: &Binding, x: Var, range: Range<usize>) -> Result<Var> {
        let mut cur = x;
        let mut skips = Vec::new();
        for i in range {
            cur = match self.spec.layers[i] {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = bound.vars[i].unwrap();
                    let y = tape.conv2d(cur, w, stride, padding)?;
                    tape.channel_bias(y, b)?
                }
                Layer::Linear { .. } => {
                    let (w, b) = bound.vars[i].unwrap();
                    tape.linear(cur, w, b)?
                }
                Layer::Relu => tape.relu(cur),
                Layer::Tanh => tape.tanh(cur),
                Layer::MaxPool2 => tape.max_pool2(cur)?,
                Layer::Upsample2 => tape.upsample2(cur)?,
                Layer::Flatten => tape.flatten(cur)?,
                Layer::SkipSave => {
                    skips.push(cur);
                    cur
                }
                Layer::SkipAdd => {
                    let saved = skips.pop().expect("validated spec");
                    tape.add(cur, saved)?
                }
            };
        }
        Ok(cur)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.run(tape, bound, x, 0..self.spec.layers.len())
    }

    fn split(&self) -> Result<usize> {
        self.spec
            .feature_split
            .ok_or_else(|| Error::MalformedSpec(format!("{} has no feature split", self.spec.role)))
    }

    /// Feature-extractor output: flattened activations before the head.
    pub fn features(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let split = self.split()?;
        self.run(tape, bound, x, 0..split)
    }

    /// Head applied to features produced by [`Network::features`].
    pub fn head(&self, tape: &mut Tape, bound: &Binding, features: Var) -> Result<Var> {
        let split = self.split()?;
        self.run(tape, bound, features, split..self.spec.layers.len())
    }

    /// Tape-free forward pass, evaluated in chunks of at most `chunk` rows.
    pub fn eval(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.eval_with(x, chunk, |net, tape, b, v| net.forward(tape, b, v))
    }

    pub fn eval_features(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        self.eval_with(x, chunk, |net, tape, b, v| net.features(tape, b, v))
    }

    fn eval_with(
        &self,
        x: &Tensor,
        chunk: usize,
        f: impl Fn(&Self, &mut Tape, &Binding, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let xv = tape.constant(x.slice_outer(start, end)?);
            let y = f(self, &mut tape, &b, xv)?;
            parts.push(tape.value(y).clone());
            start = end;
        }
        Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
    }

    /// Replaces one parameter tensor (same shape), e.g. to zero a head.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get(name) {
            Some(t) if t.shape() == value.shape() => self.params.insert(name, value),
            Some(t) => Err(Error::Shape(format!(
                "parameter {name} is {:?}, got {:?}",
                t.shape(),
                value.shape()
            ))),
            None => Err(Error::InvalidArgument(format!("no parameter named {name}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Source classifier

/// Conv/pool stages followed by a hidden linear layer and the class head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_widths: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierArch {
    pub fn desk(in_channels: usize, image_size: usize, classes: usize) -> Self {
        Self { in_channels, image_size, conv_widths: vec![16, 32], kernel: 3, hidden: 64, classes }
    }

    /// LeNet-style digits classifier on 3×32×32 inputs, ~3.13M parameters.
    pub fn paper_scale_digits() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            conv_widths: vec![64, 128],
            kernel: 5,
            hidden: 356,
            classes: 10,
        }
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut ch = self.in_channels;
        let mut size = self.image_size;
        for &w in &self.conv_widths {
            layers.push(Layer::Conv {
                in_ch: ch,
                out_ch: w,
                kernel: self.kernel,
                stride: 1,
                padding: self.kernel / 2,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            ch = w;
            size /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear { inputs: ch * size * size, outputs: self.hidden });
        layers.push(Layer::Relu);
        let split = layers.len();
        layers.push(Layer::Linear { inputs: self.hidden, outputs: self.classes });
        NetworkSpec {
            role: Role::Classifier,
            input_shape: vec![self.in_channels, self.image_size, self.image_size],
            layers,
            feature_split: Some(split),
            zero_init_final: false,
        }
    }
}

pub fn build_classifier(spec: NetworkSpec, seed: u64) -> Result<Network> {
    if spec.role != Role::Classifier {
        return Err(Error::MalformedSpec(format!("expected classifier spec, got {}", spec.role)));
    }
    if spec.feature_split.is_none() {
        return Err(Error::MalformedSpec("classifier spec needs a feature split".into()));
    }
    Network::build(spec, seed)
}

// ---------------------------------------------------------------------------
// Calibrator

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratorConfig {
    /// L∞ budget in normalised pixel units.
    pub epsilon: f64,
    pub width: usize,
    pub depth: usize,
    pub skip: bool,
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, width: 4, depth: 2, skip: true }
    }
}

impl CalibratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.width == 0 {
            return Err(Error::InvalidArgument("calibrator width must be positive".into()));
        }
        Ok(())
    }

    /// Encoder-decoder: a full-resolution stem, `depth` stride-2 stages
    /// doubling the width, then `depth` upsample+conv stages, each joined
    /// to its encoder twin by an additive skip. The output layer maps back
    /// to image channels and starts at zero.
    pub fn spec(&self, channels: usize, height: usize, width: usize) -> Result<NetworkSpec> {
        self.validate()?;
        let div = 1usize << self.depth;
        if !height.is_multiple_of(div) || !width.is_multiple_of(div) {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} not divisible by 2^{} for calibrator depth",
                self.depth
            )));
        }
        let conv = |i, o, s| Layer::Conv { in_ch: i, out_ch: o, kernel: 3, stride: s, padding: 1 };
        let w = self.width;
        let mut layers = vec![conv(channels, w, 1), Layer::Relu];
        for d in 0..self.depth {
            if self.skip {
                layers.push(Layer::SkipSave);
            }
            layers.push(conv(w << d, w << (d + 1), 2));
            layers.push(Layer::Relu);
        }
        for d in (0..self.depth).rev() {
            layers.push(Layer::Upsample2);
            layers.push(conv(w << (d + 1), w << d, 1));
            layers.push(Layer::Relu);
            if self.skip {
                layers.push(Layer::SkipAdd);
            }
        }
        layers.push(conv(w, channels, 1));
        Ok(NetworkSpec {
            role: Role::Calibrator,
            input_shape: vec![channels, height, width],
            layers,
            feature_split: None,
            zero_init_final: true,
        })
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 2]")));
    }
    Ok(())
}

pub fn build_calibrator(
    cfg: &CalibratorConfig,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Network> {
    Network::build(cfg.spec(channels, height, width)?, seed)
}

/// `clip(x + ε·tanh(G'(x)), −1, 1)` recorded on `tape`.
pub fn calibrate(
    tape: &mut Tape,
    calibrator: &Network,
    bound: &Binding,
    x: Var,
    epsilon: f64,
) -> Result<Var> {
    check_epsilon(epsilon)?;
    if calibrator.role() != Role::Calibrator {
        return Err(Error::InvalidArgument(format!("{} is not a calibrator", calibrator.role())));
    }
    let raw = calibrator.forward(tape, bound, x)?;
    let bounded = tape.tanh(raw);
    let delta = tape.scalar_mul(bounded, epsilon);
    tape.residual_clip(x, delta, -1.0, 1.0)
}

/// Tape-free [`calibrate`] over a batch.
pub fn calibrate_batch(calibrator: &Network, x: &Tensor, epsilon: f64, chunk: usize) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    let n = x.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let mut tape = Tape::new();
        let b = calibrator.bind(&mut tape, false);
        let xv = tape.constant(x.slice_outer(start, end)?);
        let y = calibrate(&mut tape, calibrator, &b, xv, epsilon)?;
        parts.push(tape.value(y).clone());
        start = end;
    }
    Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// Discriminators

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscriminatorKind {
    Pixel,
    Feature,
}

/// Two fully connected layers producing one logit per group; the output
/// layer starts at zero so the initial group posterior is uniform.
pub fn discriminator_spec(kind: DiscriminatorKind, input_dim: usize, hidden: usize) -> NetworkSpec {
    NetworkSpec {
        role: match kind {
            DiscriminatorKind::Pixel => Role::PixelDisc,
            DiscriminatorKind::Feature => Role::FeatDisc,
        },
        input_shape: vec![input_dim],
        layers: vec![
            Layer::Linear { inputs: input_dim, outputs: hidden },
            Layer::Relu,
            Layer::Linear { inputs: hidden, outputs: NUM_GROUPS },
        ],
        feature_split: None,
        zero_init_final: true,
    }
}

pub fn build_discriminator(
    kind: DiscriminatorKind,
    input_dim: usize,
    hidden: usize,
    seed: u64,
) -> Result<Network> {
    if input_dim == 0 || hidden == 0 {
        return Err(Error::MalformedSpec("discriminator dimensions must be positive".into()));
    }
    Network::build(discriminator_spec(kind, input_dim, hidden), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::Rng;

    fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn desk_classifier_shapes() {
        let net = build_classifier(ClassifierArch::desk(1, 28, 10).spec(), 1).unwrap();
        let x = random_images(3, 1, 28, 28, 0);
        let logits = net.eval(&x, 16).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
        let f = net.eval_features(&x, 16).unwrap();
        assert_eq!(f.shape(), &[3, net.spec.feature_dim().unwrap()]);
        assert!(f.all_finite());
    }

    #[test]
    fn logits_are_head_of_features() {
        let net = build_classifier(ClassifierArch::desk(1, 16, 4).spec(), 2).unwrap();
        let x = random_images(5, 1, 16, 16, 9);
        let mut tape = Tape::new();
        let b = net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = net.features(&mut tape, &b, xv).unwrap();
        let via_head = net.head(&mut tape, &b, f).unwrap();
        let direct = net.eval(&x, 64).unwrap();
        assert_eq!(tape.value(via_head), &direct);
    }

    #[test]
    fn zero_head_on_zero_input_is_uniform() {
        let arch = ClassifierArch::desk(1, 8, 5);
        let mut net = build_classifier(arch.spec(), 3).unwrap();
        let head = net.spec.layers.len() - 1;
        net.set_param(&weight_name(head), Tensor::zeros(&[5, 64])).unwrap();
        let logits = net.eval(&Tensor::zeros(&[2, 1, 8, 8]), 8).unwrap();
        let p = ops::softmax(&logits);
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let spec = ClassifierArch::desk(1, 28, 10).spec();
        let a = build_classifier(spec.clone(), 7).unwrap();
        let b = build_classifier(spec.clone(), 7).unwrap();
        let c = build_classifier(spec, 8).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_ne!(a.params.fingerprint(), c.params.fingerprint());
        let d1 = build_discriminator(DiscriminatorKind::Pixel, 64, 32, 5).unwrap();
        let d2 = build_discriminator(DiscriminatorKind::Pixel, 64, 32, 5).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn wrong_role_is_rejected() {
        let spec = discriminator_spec(DiscriminatorKind::Feature, 8, 8);
        assert!(matches!(build_classifier(spec, 0), Err(Error::MalformedSpec(_))));
        assert!(build_discriminator(DiscriminatorKind::Feature, 0, 8, 0).is_err());
    }

    #[test]
    fn fresh_calibrator_is_identity() {
        let cfg = CalibratorConfig { epsilon: 0.5, ..Default::default() };
        let cal = build_calibrator(&cfg, 1, 28, 28, 4).unwrap();
        let x = random_images(4, 1, 28, 28, 1);
        for eps in [0.0, 0.01, 0.5, 2.0] {
            let y = calibrate_batch(&cal, &x, eps, 16).unwrap();
            assert_eq!(y, x, "epsilon {eps}");
        }
    }

    #[test]
    fn calibrate_rejects_bad_epsilon() {
        let cal = build_calibrator(&CalibratorConfig::default(), 1, 8, 8, 0).unwrap();
        let x = random_images(1, 1, 8, 8, 0);
        assert!(calibrate_batch(&cal, &x, -0.1, 4).is_err());
        assert!(calibrate_batch(&cal, &x, 2.5, 4).is_err());
        assert!(calibrate_batch(&cal, &x, f64::NAN, 4).is_err());
    }

    #[test]
    fn calibrator_geometry_is_checked() {
        let cfg = CalibratorConfig { depth: 2, ..Default::default() };
        assert!(cfg.spec(1, 28, 28).is_ok());
        assert!(cfg.spec(1, 30, 30).is_err());
        let no_skip = CalibratorConfig { skip: false, ..cfg };
        assert!(!no_skip.spec(1, 28, 28).unwrap().layers.contains(&Layer::SkipAdd));
    }

    #[test]
    fn discriminator_outputs_uniform_groups_at_init() {
        let d = build_discriminator(DiscriminatorKind::Feature, 12, 16, 1).unwrap();
        let x = Tensor::new(vec![7, 12], (0..84).map(|i| (i as f64).sin()).collect()).unwrap();
        let logits = d.eval(&x, 64).unwrap();
        assert_eq!(logits.shape(), &[7, NUM_GROUPS]);
        assert!(ops::softmax(&logits).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn parameter_counts() {
        let spec = NetworkSpec {
            role: Role::Calibrator,
            input_shape: vec![1, 4, 4],
            layers: vec![Layer::Conv { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, padding: 1 }],
            feature_split: None,
            zero_init_final: false,
        };
        assert_eq!(Network::build(spec, 0).unwrap().count_parameters(), 10);
        assert_eq!(count_parameters(&ParameterSet::new()), 0);
    }

    #[test]
    fn frozen_sets_reject_updates() {
        let mut d = build_discriminator(DiscriminatorKind::Feature, 4, 4, 0).unwrap();
        let before = d.params.clone();
        d.params.freeze();
        let grads: BTreeMap<String, Tensor> =
            d.params.iter().map(|(k, v)| (k.to_string(), v.map(|_| 1.0))).collect();
        let mut adam = AdamState::new(Default::default());
        assert!(matches!(d.params.apply_adam(&mut adam, &grads), Err(Error::Frozen(_))));
        assert_eq!(d.params.fingerprint(), before.fingerprint());
        assert!(d.params.insert("l0.w", Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn from_parts_validates_parameters() {
        let net = build_discriminator(DiscriminatorKind::Pixel, 6, 5, 0).unwrap();
        assert!(Network::from_parts(net.spec.clone(), net.params.clone()).is_ok());
        let other = build_discriminator(DiscriminatorKind::Pixel, 7, 5, 0).unwrap();
        assert!(Network::from_parts(net.spec.clone(), other.params).is_err());
    }
}
