use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Classifier,
    Calibrator,
    PixelDisc,
    FeatDisc,
}

impl Role {
    pub fn tag(self) -> u32 {
        match self {
            Role::Classifier => 0,
            Role::Calibrator => 1,
            Role::PixelDisc => 2,
            Role::FeatDisc => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        [Role::Classifier, Role::Calibrator, Role::PixelDisc, Role::FeatDisc]
            .into_iter()
            .find(|r| r.tag() == tag)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Classifier => "classifier",
            Role::Calibrator => "calibrator",
            Role::PixelDisc => "pixel_disc",
            Role::FeatDisc => "feat_disc",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Role::Classifier),
            "calibrator" => Ok(Role::Calibrator),
            "pixel_disc" => Ok(Role::PixelDisc),
            "feat_disc" => Ok(Role::FeatDisc),
            other => Err(Error::MalformedSpec(format!("unknown role '{other}'"))),
        }
    }
}

/// One layer of a [`NetworkSpec`]. `Conv` and `Linear` carry a bias.
///
/// `SkipSave` pushes the current activation on a stack and `SkipAdd` pops
/// one and adds it elementwise, which is enough to describe an
/// encoder-decoder with additive skip connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    Linear { inputs: usize, outputs: usize },
    Relu,
    Tanh,
    MaxPool2,
    Upsample2,
    Flatten,
    SkipSave,
    SkipAdd,
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }

    /// Weight and bias shapes, for layers that have them.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv { in_ch, out_ch, kernel, .. } => {
                Some((vec![out_ch, in_ch, kernel, kernel], vec![out_ch]))
            }
            Layer::Linear { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { in_ch, out_ch, kernel, stride, padding } => {
                write!(f, "conv {in_ch} {out_ch} {kernel} {stride} {padding}")
            }
            Layer::Linear { inputs, outputs } => write!(f, "linear {inputs} {outputs}"),
            Layer::Relu => f.write_str("relu"),
            Layer::Tanh => f.write_str("tanh"),
            Layer::MaxPool2 => f.write_str("maxpool2"),
            Layer::Upsample2 => f.write_str("upsample2"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::SkipSave => f.write_str("skip_save"),
            Layer::SkipAdd => f.write_str("skip_add"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>> {
            if parts.len() != n + 1 {
                return Err(Error::MalformedSpec(format!("layer '{s}' expects {n} numbers")));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::MalformedSpec(format!("bad number in '{s}'"))))
                .collect()
        };
        Ok(match parts.first().copied() {
            Some("conv") => {
                let v = nums(5)?;
                Layer::Conv { in_ch: v[0], out_ch: v[1], kernel: v[2], stride: v[3], padding: v[4] }
            }
            Some("linear") => {
                let v = nums(2)?;
                Layer::Linear { inputs: v[0], outputs: v[1] }
            }
            Some("relu") => Layer::Relu,
            Some("tanh") => Layer::Tanh,
            Some("maxpool2") => Layer::MaxPool2,
            Some("upsample2") => Layer::Upsample2,
            Some("flatten") => Layer::Flatten,
            Some("skip_save") => Layer::SkipSave,
            Some("skip_add") => Layer::SkipAdd,
            _ => return Err(Error::MalformedSpec(format!("unknown layer '{s}'"))),
        })
    }
}

/// Declarative description of a network: per-sample input shape plus an
/// ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub role: Role,
    /// Per-sample input shape: `[C, H, W]` for images, `[D]` for vectors.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Index of the first head layer; layers before it form the feature
    /// extractor. Required for classifiers.
    pub feature_split: Option<usize>,
    /// Zero-initialise the last parametrised layer.
    pub zero_init_final: bool,
}

impl NetworkSpec {
    /// Checks that adjacent layers compose and returns the per-sample shape
    /// after every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::MalformedSpec(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::MalformedSpec("no layers".into()));
        }
        let mut cur = self.input_shape.clone();
        let mut skips: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::MalformedSpec(format!("layer {i} ({layer}): {why}"));
            cur = match *layer {
                Layer::Conv { in_ch, out_ch, kernel, stride, padding } => {
                    if cur.len() != 3 || cur[0] != in_ch {
                        return Err(bad(format!("input {cur:?}")));
                    }
                    if kernel == 0 || stride == 0 || out_ch == 0 {
                        return Err(bad("zero-sized conv".into()));
                    }
                    let (ph, pw) = (cur[1] + 2 * padding, cur[2] + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(bad(format!("kernel larger than padded input {cur:?}")));
                    }
                    vec![out_ch, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
                }
                Layer::Linear { inputs, outputs } => {
                    if cur.len() != 1 || cur[0] != inputs || outputs == 0 {
                        return Err(bad(format!("input {cur:?}")));
                    }
                    vec![outputs]
                }
                Layer::Relu | Layer::Tanh => cur,
                Layer::MaxPool2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(bad(format!("input {cur:?}")));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                Layer::Upsample2 => {
                    if cur.len() != 3 {
                        return Err(bad(format!("input {cur:?}")));
                    }
                    vec![cur[0], cur[1] * 2, cur[2] * 2]
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::SkipSave => {
                    skips.push(cur.clone());
                    cur
                }
                Layer::SkipAdd => {
                    let saved = skips.pop().ok_or_else(|| bad("no saved activation".into()))?;
                    if saved != cur {
                        return Err(bad(format!("skip {saved:?} does not match {cur:?}")));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        if !skips.is_empty() {
            return Err(Error::MalformedSpec(format!("{} unused skip saves", skips.len())));
        }
        if let Some(split) = self.feature_split {
            if split == 0 || split >= self.layers.len() {
                return Err(Error::MalformedSpec(format!("feature split {split} out of range")));
            }
            if out[split - 1].len() != 1 {
                return Err(Error::MalformedSpec(format!(
                    "features before layer {split} are not flat: {:?}",
                    out[split - 1]
                )));
            }
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// Per-sample feature width at the split point.
    pub fn feature_dim(&self) -> Result<usize> {
        let split = self
            .feature_split
            .ok_or_else(|| Error::MalformedSpec("spec has no feature split".into()))?;
        Ok(self.shapes()?[split - 1][0])
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = format!(
            "role={}\ninput={}\nsplit={}\nzero_final={}\n",
            self.role,
            join(&self.input_shape),
            self.feature_split.map_or("none".to_string(), |v| v.to_string()),
            u8::from(self.zero_init_final),
        );
        for l in &self.layers {
            s.push_str(&format!("layer={l}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut role = None;
        let mut input_shape = None;
        let mut feature_split = None;
        let mut zero_init_final = false;
        let mut layers = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedSpec(format!("line '{line}'")))?;
            match k {
                "role" => role = Some(v.parse()?),
                "input" => {
                    input_shape = Some(
                        v.split(',')
                            .map(|p| p.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| Error::MalformedSpec(format!("input '{v}'")))?,
                    )
                }
                "split" => {
                    feature_split = match v {
                        "none" => None,
                        n => Some(n.parse().map_err(|_| Error::MalformedSpec(format!("split '{n}'")))?),
                    }
                }
                "zero_final" => zero_init_final = v == "1",
                "layer" => layers.push(v.parse()?),
                other => return Err(Error::MalformedSpec(format!("unknown key '{other}'"))),
            }
        }
        let spec = NetworkSpec {
            role: role.ok_or_else(|| Error::MalformedSpec("missing role".into()))?,
            input_shape: input_shape.ok_or_else(|| Error::MalformedSpec("missing input".into()))?,
            layers,
            feature_split,
            zero_init_final,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
