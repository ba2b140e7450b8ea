//! Target models: layer descriptions, parameters, forward passes and gradients.
//!
//! A [`ModelSpec`] is a flat layer list ending in a single linear classifier
//! head. Parameters live in an ordered [`TensorMap`] keyed `"<layer>.weight"`
//! and `"<layer>.bias"`; every gradient vector in the crate uses that order.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    LeakyRelu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [Self::Relu, Self::Sigmoid, Self::Tanh, Self::LeakyRelu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::LeakyRelu => "leaky_relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "leaky-relu" && *a == Self::LeakyRelu))
            .ok_or_else(|| Error::Invalid(format!("unknown activation '{s}'")))
    }

    fn code(self) -> f64 {
        match self {
            Self::Relu => 0.0,
            Self::Sigmoid => 1.0,
            Self::Tanh => 2.0,
            Self::LeakyRelu => 3.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.code() == c)
            .ok_or_else(|| Error::Format(format!("unknown activation code {c}")))
    }

    pub(crate) fn apply(self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        match self {
            Self::Relu => g.relu(z),
            Self::Sigmoid => g.sigmoid(z),
            Self::Tanh => g.tanh(z),
            Self::LeakyRelu => g.leaky_relu(z, LEAKY_RELU_SLOPE),
        }
    }

    /// Derivative at pre-activation `z`, given the activation output `a`, as graph nodes.
    pub(crate) fn derivative(self, g: &mut Graph, z: NodeId, a: NodeId) -> Result<NodeId> {
        match self {
            Self::Relu => g.step(z),
            Self::LeakyRelu => g.leaky_step(z, LEAKY_RELU_SLOPE),
            Self::Sigmoid => {
                let one_minus = g.affine(a, -1.0, 1.0)?;
                g.mul(a, one_minus)
            }
            Self::Tanh => {
                let sq = g.mul(a, a)?;
                g.affine(sq, -1.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Flatten,
    /// Per-sample target shape.
    Reshape { shape: Vec<usize> },
    Linear { in_features: usize, out_features: usize, bias: bool },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Activation(ActivationKind),
    /// Linear classifier head with bias; always the last layer.
    Head { in_features: usize, classes: usize },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv { .. } | Layer::Head { .. })
    }

    fn describe(&self) -> String {
        match self {
            Layer::Flatten => "flatten".into(),
            Layer::Reshape { shape } => format!("reshape{shape:?}"),
            Layer::Linear { in_features, out_features, bias } => {
                format!("linear({in_features},{out_features},bias={bias})")
            }
            Layer::Conv { in_channels, out_channels, kernel, stride, pad } => {
                format!("conv({in_channels},{out_channels},k={kernel},s={stride},p={pad})")
            }
            Layer::Activation(a) => format!("activation({})", a.name()),
            Layer::Head { in_features, classes } => format!("head({in_features},{classes})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub layer: Layer,
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.name, self.layer.describe())
    }
}

/// Ordered layer stack with a per-sample input shape `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Named tensors in a fixed order: parameters, gradients and updates all use it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorMap {
    entries: IndexMap<String, Tensor>,
}

pub type Params = TensorMap;
pub type GradientReport = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Shape(format!("missing tensor '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }

    /// Rebuilds a map with this map's names from tensors in the same order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.len(),
                tensors.len()
            )));
        }
        let mut out = Self::new();
        for ((name, old), t) in self.entries.iter().zip(tensors) {
            if old.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{name}': expected shape {:?}, got {:?}",
                    old.shape(),
                    t.shape()
                )));
            }
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    /// All values concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &TensorMap) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    fn check_layout(&self, other: &TensorMap) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("tensor maps have different names or shapes".into()))
        }
    }

    pub fn zip_map(&self, other: &TensorMap, f: impl Fn(f64, f64) -> f64) -> Result<TensorMap> {
        self.check_layout(other)?;
        let mut out = TensorMap::new();
        for ((name, a), b) in self.entries.iter().zip(other.entries.values()) {
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, a) in &self.entries {
            out.insert(name.clone(), a.map(&f));
        }
        out
    }

    pub fn scale(&self, c: f64) -> TensorMap {
        self.map(|v| v * c)
    }

    pub fn norm(&self) -> f64 {
        self.entries.values().map(|t| t.dot(t)).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &TensorMap) -> f64 {
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Weight initialization scheme. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Init {
    /// Kaiming-uniform with negative slope `√5`: `U(±1/√fan_in)`, the common
    /// framework default for linear and convolution layers.
    #[default]
    KaimingUniform,
    /// Kaiming-uniform with ReLU gain: `U(±√(6/fan_in))`.
    KaimingUniformRelu,
    /// `U(±gain/√fan_in)`.
    Scaled(f64),
}

impl Init {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            Init::KaimingUniform => 1.0 / (fan_in as f64).sqrt(),
            Init::KaimingUniformRelu => (6.0 / fan_in as f64).sqrt(),
            Init::Scaled(gain) => gain / (fan_in as f64).sqrt(),
        }
    }
}

/// Per-sample input shape of each layer of a valid spec.
#[derive(Clone, Debug)]
pub struct Trace {
    pub inputs: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(input: [usize; 3], classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input, classes, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    pub fn trace(&self) -> Result<Trace> {
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero dimension", self.input)));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        let mut shape = self.input.to_vec();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut names = std::collections::HashSet::new();
        let n = self.layers.len();
        for (i, ls) in self.layers.iter().enumerate() {
            let broken = |msg: String| Error::Spec(format!("layer {i} '{}': {msg}", ls.name));
            if !names.insert(ls.name.as_str()) {
                return Err(broken("duplicate layer name".into()));
            }
            inputs.push(shape.clone());
            let numel: usize = shape.iter().product();
            shape = match &ls.layer {
                Layer::Flatten => vec![numel],
                Layer::Reshape { shape: target } => {
                    if target.iter().product::<usize>() != numel || target.contains(&0) {
                        return Err(broken(format!("cannot reshape {shape:?} into {target:?}")));
                    }
                    target.clone()
                }
                Layer::Linear { in_features, out_features, .. } => {
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(broken(format!(
                            "expects {in_features} input features but receives shape {shape:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(broken("zero output features".into()));
                    }
                    vec![*out_features]
                }
                Layer::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(broken(format!(
                            "expects {in_channels} input channels but receives shape {shape:?}"
                        )));
                    }
                    if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                        return Err(broken("kernel, stride and channel count must be positive".into()));
                    }
                    let (h, w) = (shape[1] + 2 * pad, shape[2] + 2 * pad);
                    if *kernel > h || *kernel > w {
                        return Err(broken(format!("kernel {kernel} exceeds padded input {shape:?}")));
                    }
                    vec![*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                Layer::Activation(_) => shape,
                Layer::Head { in_features, classes } => {
                    if i != n - 1 {
                        return Err(broken("classifier head must be the last layer".into()));
                    }
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(broken(format!(
                            "expects {in_features} input features but receives shape {shape:?}"
                        )));
                    }
                    if *classes != self.classes {
                        return Err(broken(format!(
                            "head has {classes} outputs but the model declares {} classes",
                            self.classes
                        )));
                    }
                    vec![*classes]
                }
            };
        }
        match self.layers.last() {
            Some(LayerSpec { layer: Layer::Head { .. }, .. }) => Ok(Trace { inputs }),
            _ => Err(Error::Spec("the last layer must be a classifier head".into())),
        }
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for ls in &self.layers {
            match &ls.layer {
                Layer::Linear { in_features, out_features, bias } => {
                    out.push((format!("{}.weight", ls.name), vec![*out_features, *in_features]));
                    if *bias {
                        out.push((format!("{}.bias", ls.name), vec![*out_features]));
                    }
                }
                Layer::Conv { in_channels, out_channels, kernel, .. } => {
                    out.push((
                        format!("{}.weight", ls.name),
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                    ));
                    out.push((format!("{}.bias", ls.name), vec![*out_channels]));
                }
                Layer::Head { in_features, classes } => {
                    out.push((format!("{}.weight", ls.name), vec![*classes, *in_features]));
                    out.push((format!("{}.bias", ls.name), vec![*classes]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn head(&self) -> Option<&LayerSpec> {
        self.layers.last().filter(|l| matches!(l.layer, Layer::Head { .. }))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn activations(&self) -> impl Iterator<Item = ActivationKind> + '_ {
        self.layers.iter().filter_map(|l| match l.layer {
            Layer::Activation(a) => Some(a),
            _ => None,
        })
    }

    /// Index of the first layer holding parameters.
    pub fn first_param_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.layer.has_params())
    }

    /// True when the first parameterized layer is a biased linear layer fed
    /// with the (flattened) raw input.
    pub fn is_linear_first(&self) -> bool {
        match self.first_param_layer() {
            Some(i) => {
                matches!(self.layers[i].layer, Layer::Linear { bias: true, .. })
                    && self.layers[..i].iter().all(|l| matches!(l.layer, Layer::Flatten | Layer::Reshape { .. }))
            }
            None => false,
        }
    }

    /// Canonical description of the structure, excluding names and parameter values.
    pub fn canonical_string(&self) -> String {
        let mut s = format!("input{:?};classes={};", self.input, self.classes);
        for l in &self.layers {
            let _ = write!(s, "{};", l.layer.describe());
        }
        s
    }

    /// SHA-256 of [`Self::canonical_string`], hex encoded.
    pub fn structural_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records describing this spec, for embedding in parameter files.
    pub fn to_records(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let [c, h, w] = self.input;
        m.insert(
            "__spec__.input",
            Tensor::from_vec(vec![c as f64, h as f64, w as f64, self.classes as f64]),
        );
        for (i, ls) in self.layers.iter().enumerate() {
            let v: Vec<f64> = match &ls.layer {
                Layer::Flatten => vec![0.0],
                Layer::Reshape { shape } => std::iter::once(1.0).chain(shape.iter().map(|&d| d as f64)).collect(),
                Layer::Linear { in_features, out_features, bias } => {
                    vec![2.0, *in_features as f64, *out_features as f64, f64::from(u8::from(*bias))]
                }
                Layer::Conv { in_channels, out_channels, kernel, stride, pad } => vec![
                    3.0,
                    *in_channels as f64,
                    *out_channels as f64,
                    *kernel as f64,
                    *stride as f64,
                    *pad as f64,
                ],
                Layer::Activation(a) => vec![4.0, a.code()],
                Layer::Head { in_features, classes } => vec![5.0, *in_features as f64, *classes as f64],
            };
            m.insert(format!("__layer__.{i:04}.{}", ls.name), Tensor::from_vec(v));
        }
        m
    }

    /// Inverse of [`Self::to_records`]; ignores unrelated records.
    pub fn from_records(records: &TensorMap) -> Result<Self> {
        let input = records
            .get("__spec__.input")
            .ok_or_else(|| Error::Format("no embedded model spec".into()))?;
        let d = input.data();
        if d.len() != 4 {
            return Err(Error::Format("spec header must hold 4 values".into()));
        }
        let mut layers = Vec::new();
        for (name, t) in records.iter() {
            let Some(rest) = name.strip_prefix("__layer__.") else { continue };
            let lname = rest.get(5..).ok_or_else(|| Error::Format(format!("bad layer record '{name}'")))?;
            let v = t.data();
            let u = |i: usize| -> Result<usize> {
                v.get(i).map(|&x| x as usize).ok_or_else(|| Error::Format(format!("layer record '{name}' too short")))
            };
            let layer = match v[0] as i64 {
                0 => Layer::Flatten,
                1 => Layer::Reshape { shape: v[1..].iter().map(|&x| x as usize).collect() },
                2 => Layer::Linear { in_features: u(1)?, out_features: u(2)?, bias: u(3)? == 1 },
                3 => Layer::Conv {
                    in_channels: u(1)?,
                    out_channels: u(2)?,
                    kernel: u(3)?,
                    stride: u(4)?,
                    pad: u(5)?,
                },
                4 => Layer::Activation(ActivationKind::from_code(*v.get(1).unwrap_or(&-1.0))?),
                5 => Layer::Head { in_features: u(1)?, classes: u(2)? },
                k => return Err(Error::Format(format!("unknown layer kind {k}"))),
            };
            layers.push(LayerSpec { name: lname.to_string(), layer });
        }
        Self::new([d[0] as usize, d[1] as usize, d[2] as usize], d[3] as usize, layers)
    }
}

fn named(name: &str, layer: Layer) -> LayerSpec {
    LayerSpec { name: name.to_string(), layer }
}

/// The canonical architectures.
pub mod zoo {
    use super::*;

    /// flatten → linear → act → linear head.
    pub fn mlp2(input: [usize; 3], hidden: usize, classes: usize, act: ActivationKind) -> ModelSpec {
        let m = input.iter().product();
        ModelSpec::new(
            input,
            classes,
            vec![
                named("flatten", Layer::Flatten),
                named("fc1", Layer::Linear { in_features: m, out_features: hidden, bias: true }),
                named("act1", Layer::Activation(act)),
                named("head", Layer::Head { in_features: hidden, classes }),
            ],
        )
        .expect("mlp2 is well formed")
    }

    fn conv(i: usize, o: usize) -> Layer {
        Layer::Conv { in_channels: i, out_channels: o, kernel: 3, stride: 1, pad: 1 }
    }

    fn cnn_body(c: usize, deep: bool, act: ActivationKind) -> Vec<LayerSpec> {
        let mut v = vec![named("conv1", conv(c, 8)), named("act1", Layer::Activation(act))];
        if deep {
            v.push(named("conv1b", conv(8, 8)));
            v.push(named("act1b", Layer::Activation(act)));
        }
        v.push(named("conv2", conv(8, 16)));
        v.push(named("act2", Layer::Activation(act)));
        if deep {
            v.push(named("conv2b", conv(16, 16)));
            v.push(named("act2b", Layer::Activation(act)));
        }
        v
    }

    fn with_head(mut body: Vec<LayerSpec>, input: [usize; 3], classes: usize) -> ModelSpec {
        let feat = 16 * input[1] * input[2];
        body.push(named("flatten", Layer::Flatten));
        body.push(named("head", Layer::Head { in_features: feat, classes }));
        ModelSpec::new(input, classes, body).expect("conv stack is well formed")
    }

    /// conv(c→8, k3) → act → conv(8→16, k3) → act → flatten → head. Padding 1 keeps `h×w`.
    pub fn cnn_s(input: [usize; 3], classes: usize, act: ActivationKind) -> ModelSpec {
        with_head(cnn_body(input[0], false, act), input, classes)
    }

    /// CNN-S with each convolution doubled.
    pub fn cnn_s_deep(input: [usize; 3], classes: usize, act: ActivationKind) -> ModelSpec {
        with_head(cnn_body(input[0], true, act), input, classes)
    }

    /// A biased linear layer on the raw pixels, reshaped back to an image and fed to CNN-S.
    pub fn linear_first(input: [usize; 3], classes: usize, act: ActivationKind) -> ModelSpec {
        let m = input.iter().product();
        let mut layers = vec![
            named("flatten_in", Layer::Flatten),
            named("fc0", Layer::Linear { in_features: m, out_features: m, bias: true }),
            named("act0", Layer::Activation(act)),
            named("unflatten", Layer::Reshape { shape: input.to_vec() }),
        ];
        layers.extend(cnn_body(input[0], false, act));
        with_head(layers, input, classes)
    }

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Arch {
        Mlp2,
        CnnS,
        CnnSDeep,
        LinearFirst,
    }

    impl Arch {
        pub const ALL: [Arch; 4] = [Arch::Mlp2, Arch::CnnS, Arch::CnnSDeep, Arch::LinearFirst];

        pub fn name(self) -> &'static str {
            match self {
                Arch::Mlp2 => "mlp2",
                Arch::CnnS => "cnn-s",
                Arch::CnnSDeep => "cnn-s-deep",
                Arch::LinearFirst => "linear-first",
            }
        }

        pub fn parse(s: &str) -> Result<Self> {
            Self::ALL
                .into_iter()
                .find(|a| a.name() == s)
                .ok_or_else(|| Error::Invalid(format!("unknown architecture '{s}'")))
        }

        pub fn build(self, input: [usize; 3], classes: usize, act: ActivationKind, hidden: usize) -> ModelSpec {
            match self {
                Arch::Mlp2 => mlp2(input, hidden, classes, act),
                Arch::CnnS => cnn_s(input, classes, act),
                Arch::CnnSDeep => cnn_s_deep(input, classes, act),
                Arch::LinearFirst => linear_first(input, classes, act),
            }
        }
    }
}

/// Initializes every parameter of `spec`; deterministic per seed.
pub fn build_model(spec: &ModelSpec, init: Init, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut r = rng::seeded(seed);
    let mut params = Params::new();
    for (name, shape) in spec.param_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let b = init.bound(fan_in);
            let n = shape.iter().product();
            Tensor::from_parts(shape, (0..n).map(|_| r.random_range(-b..=b)).collect())
        };
        params.insert(name, t);
    }
    Ok(params)
}

fn check_params(spec: &ModelSpec, params: &Params) -> Result<()> {
    let shapes = spec.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::Shape(format!(
            "model expects {} parameter tensors, got {}",
            shapes.len(),
            params.len()
        )));
    }
    for ((name, shape), (pname, t)) in shapes.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != t.shape() {
            return Err(Error::Shape(format!(
                "parameter '{pname}' {:?} does not match expected '{name}' {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != spec.input {
        return Err(Error::Shape(format!(
            "batch shape {s:?} does not match model input [n, {}, {}, {}]",
            spec.input[0], spec.input[1], spec.input[2]
        )));
    }
    if let Some(y) = labels {
        if y.len() != s[0] {
            return Err(Error::Shape(format!("{} labels for a batch of {}", y.len(), s[0])));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= spec.classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {} classes", spec.classes)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Cached {
    Reshape { input: NodeId },
    Linear { input: NodeId, w: NodeId },
    Conv { input: NodeId, w: NodeId, stride: usize, pad: usize, kernel: usize },
    Activation { kind: ActivationKind, z: NodeId, out: NodeId },
}

/// A forward pass recorded in a graph.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Inputs to each activation layer, in order.
    pub preactivations: Vec<NodeId>,
    cache: Vec<(usize, Cached)>,
    param_nodes: Vec<NodeId>,
    batch: usize,
}

impl ModelSpec {
    /// Records the forward pass of `x` (`[n, c, h, w]`) using parameter nodes in canonical order.
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<ForwardPass> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "forward: expected {} parameter nodes, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), &p) in shapes.iter().zip(params) {
            if g.shape(p) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "forward: parameter '{name}' has shape {:?}, expected {shape:?}",
                    g.shape(p)
                )));
            }
        }
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != self.input {
            return Err(Error::Shape(format!("forward: batch shape {xs:?} does not match input {:?}", self.input)));
        }
        let n = xs[0];
        let mut h = x;
        let mut pi = 0;
        let mut cache = Vec::new();
        let mut pre = Vec::new();
        for (li, ls) in self.layers.iter().enumerate() {
            h = match &ls.layer {
                Layer::Flatten => {
                    let numel = g.value(h).len() / n;
                    cache.push((li, Cached::Reshape { input: h }));
                    g.reshape(h, &[n, numel])?
                }
                Layer::Reshape { shape } => {
                    let mut s = vec![n];
                    s.extend_from_slice(shape);
                    cache.push((li, Cached::Reshape { input: h }));
                    g.reshape(h, &s)?
                }
                Layer::Linear { bias, .. } => {
                    let w = params[pi];
                    pi += 1;
                    cache.push((li, Cached::Linear { input: h, w }));
                    let wt = g.transpose(w)?;
                    let z = g.matmul(h, wt)?;
                    if *bias {
                        let b = params[pi];
                        pi += 1;
                        g.add_bias(z, b)?
                    } else {
                        z
                    }
                }
                Layer::Head { .. } => {
                    let (w, b) = (params[pi], params[pi + 1]);
                    pi += 2;
                    cache.push((li, Cached::Linear { input: h, w }));
                    let wt = g.transpose(w)?;
                    let z = g.matmul(h, wt)?;
                    g.add_bias(z, b)?
                }
                Layer::Conv { stride, pad, kernel, .. } => {
                    let (w, b) = (params[pi], params[pi + 1]);
                    pi += 2;
                    cache.push((li, Cached::Conv { input: h, w, stride: *stride, pad: *pad, kernel: *kernel }));
                    let z = g.conv2d(h, w, *stride, *pad)?;
                    g.add_bias(z, b)?
                }
                Layer::Activation(kind) => {
                    pre.push(h);
                    let out = kind.apply(g, h)?;
                    cache.push((li, Cached::Activation { kind: *kind, z: h, out }));
                    out
                }
            };
        }
        Ok(ForwardPass { logits: h, preactivations: pre, cache, param_nodes: params.to_vec(), batch: n })
    }

    /// Writes the mean cross-entropy parameter gradient into the graph as nodes.
    ///
    /// The returned nodes are ordinary differentiable expressions of the input
    /// and the parameter nodes, so a distance between them and a target
    /// gradient can itself be differentiated.
    pub fn param_grads_in_graph(
        &self,
        g: &mut Graph,
        fwd: &ForwardPass,
        labels: &[usize],
    ) -> Result<Vec<NodeId>> {
        if labels.len() != fwd.batch {
            return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), fwd.batch)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {} classes", self.classes)));
        }
        let n = fwd.batch;
        let mut onehot = Tensor::zeros(&[n, self.classes]);
        for (i, &y) in labels.iter().enumerate() {
            onehot.data_mut()[i * self.classes + y] = 1.0;
        }
        let p = g.softmax(fwd.logits)?;
        let oh = g.constant(onehot);
        let diff = g.sub(p, oh)?;
        let mut d = g.scale(diff, 1.0 / n as f64)?;

        let first_param = self.first_param_layer().unwrap_or(0);
        let mut grads: Vec<Option<NodeId>> = vec![None; fwd.param_nodes.len()];
        let mut pi = fwd.param_nodes.len();
        for (li, c) in fwd.cache.iter().rev() {
            let li = *li;
            let need_dx = li > first_param;
            match (c, &self.layers[li].layer) {
                (Cached::Reshape { input }, _) => {
                    if !need_dx {
                        continue;
                    }
                    let s = g.shape(*input).to_vec();
                    d = g.reshape(d, &s)?;
                }
                (Cached::Linear { input, w }, layer) => {
                    let has_bias = matches!(layer, Layer::Head { .. } | Layer::Linear { bias: true, .. });
                    if has_bias {
                        pi -= 1;
                        grads[pi] = Some(g.sum_to_bias(d)?);
                    }
                    pi -= 1;
                    let dt = g.transpose(d)?;
                    grads[pi] = Some(g.matmul(dt, *input)?);
                    if need_dx {
                        d = g.matmul(d, *w)?;
                    }
                }
                (Cached::Conv { input, w, stride, pad, kernel }, _) => {
                    pi -= 1;
                    grads[pi] = Some(g.sum_to_bias(d)?);
                    pi -= 1;
                    grads[pi] = Some(g.conv_weight_grad(*input, d, *stride, *pad, (*kernel, *kernel))?);
                    if need_dx {
                        let s = g.shape(*input).to_vec();
                        d = g.conv_transpose(d, *w, *stride, *pad, (s[2], s[3]))?;
                    }
                }
                (Cached::Activation { kind, z, out }, _) => {
                    if li > first_param {
                        let dz = kind.derivative(g, *z, *out)?;
                        d = g.mul(d, dz)?;
                    }
                }
            }
        }
        grads
            .into_iter()
            .map(|o| o.ok_or_else(|| Error::Spec("parameter without gradient".into())))
            .collect()
    }
}

/// Adds every parameter of `params` to the graph as constants.
pub fn constant_params(g: &mut Graph, params: &Params) -> Vec<NodeId> {
    params.tensors().map(|t| g.constant(t.clone())).collect()
}

pub fn variable_params(g: &mut Graph, params: &Params) -> Vec<NodeId> {
    params.tensors().map(|t| g.variable(t.clone())).collect()
}

/// Mean cross-entropy loss of a labelled batch and its gradient for every parameter.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradientReport)> {
    check_params(spec, params)?;
    check_batch(spec, x, Some(labels))?;
    let mut g = Graph::new();
    let pn = variable_params(&mut g, params);
    let xn = g.constant(x.clone());
    let fwd = spec.forward(&mut g, &pn, xn)?;
    let loss = g.softmax_cross_entropy(fwd.logits, labels)?;
    let mut grads = g.backward(loss)?;
    let mut report = GradientReport::new();
    for ((name, _), id) in params.iter().zip(&pn) {
        report.insert(name, grads.take(*id));
    }
    Ok((g.value(loss).item(), report))
}

/// Per-sample gradients, one report per row of `x`.
pub fn per_sample_grads(
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<GradientReport>> {
    check_batch(spec, x, Some(labels))?;
    (0..labels.len())
        .map(|i| {
            let xi = x.slice_rows(i, 1)?;
            loss_and_grads(spec, params, &xi, &labels[i..=i]).map(|(_, g)| g)
        })
        .collect()
}

/// Logits for a batch.
pub fn logits(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<Tensor> {
    check_params(spec, params)?;
    check_batch(spec, x, None)?;
    let mut g = Graph::new();
    let pn = constant_params(&mut g, params);
    let xn = g.constant(x.clone());
    let fwd = spec.forward(&mut g, &pn, xn)?;
    Ok(g.value(fwd.logits).clone())
}

/// Inputs to every activation layer for a batch.
pub fn preactivations(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<Vec<Tensor>> {
    check_params(spec, params)?;
    check_batch(spec, x, None)?;
    let mut g = Graph::new();
    let pn = constant_params(&mut g, params);
    let xn = g.constant(x.clone());
    let fwd = spec.forward(&mut g, &pn, xn)?;
    Ok(fwd.preactivations.iter().map(|&id| g.value(id).clone()).collect())
}

pub fn accuracy(spec: &ModelSpec, params: &Params, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let z = logits(spec, params, x)?;
    let k = spec.classes;
    let hits = z
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::zoo::*;
    use super::*;

    #[test]
    fn linear_shapes_and_zero_bias() {
        let spec = ModelSpec::new(
            [1, 2, 2],
            2,
            vec![named("flatten", Layer::Flatten), named("head", Layer::Head { in_features: 4, classes: 2 })],
        )
        .unwrap();
        let p = build_model(&spec, Init::KaimingUniform, 7).unwrap();
        assert_eq!(p.get("head.weight").unwrap().shape(), &[2, 4]);
        assert_eq!(p.get("head.bias").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(p, build_model(&spec, Init::KaimingUniform, 7).unwrap());
        assert_ne!(p, build_model(&spec, Init::KaimingUniform, 8).unwrap());
    }

    #[test]
    fn init_bounds_hold() {
        for init in [Init::KaimingUniform, Init::KaimingUniformRelu] {
            for seed in 0..5 {
                let spec = cnn_s([3, 8, 8], 10, ActivationKind::Relu);
                let p = build_model(&spec, init, seed).unwrap();
                for (name, t) in p.iter().filter(|(n, _)| n.ends_with(".weight")) {
                    let fan_in: usize = t.shape()[1..].iter().product();
                    let limit = (6.0 / fan_in as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= limit), "{name}");
                }
            }
        }
    }

    #[test]
    fn broken_chains_are_reported() {
        let err = ModelSpec::new(
            [1, 4, 4],
            2,
            vec![
                named("flatten", Layer::Flatten),
                named("fc", Layer::Linear { in_features: 15, out_features: 4, bias: true }),
                named("head", Layer::Head { in_features: 4, classes: 2 }),
            ],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("layer 1 'fc'"), "{err}");
        let no_head = ModelSpec::new([1, 2, 2], 2, vec![named("flatten", Layer::Flatten)]);
        assert!(no_head.is_err());
        let two_heads = ModelSpec::new(
            [1, 2, 2],
            2,
            vec![
                named("flatten", Layer::Flatten),
                named("h1", Layer::Head { in_features: 4, classes: 2 }),
                named("h2", Layer::Head { in_features: 2, classes: 2 }),
            ],
        );
        assert!(two_heads.is_err());
    }

    #[test]
    fn structural_hash_tracks_structure_only() {
        let a = mlp2([1, 8, 8], 16, 10, ActivationKind::Relu);
        assert_eq!(a.structural_hash(), a.clone().structural_hash());
        let b = mlp2([1, 8, 8], 16, 10, ActivationKind::Sigmoid);
        assert_ne!(a.structural_hash(), b.structural_hash());
        let mut renamed = a.clone();
        renamed.layers[1].name = "dense".into();
        assert_eq!(a.structural_hash(), renamed.structural_hash());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let spec = mlp2([1, 2, 2], 3, 2, ActivationKind::Relu);
        let mut p = build_model(&spec, Init::KaimingUniform, 1).unwrap();
        *p.get_mut("head.weight").unwrap() = Tensor::zeros(&[2, 3]);
        let x = Tensor::full(&[2, 1, 2, 2], 0.3);
        let (loss, _) = loss_and_grads(&spec, &p, &x, &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn in_graph_gradient_matches_tape_gradient() {
        for spec in [
            mlp2([1, 4, 4], 5, 3, ActivationKind::Sigmoid),
            cnn_s([2, 4, 4], 3, ActivationKind::Tanh),
            linear_first([1, 4, 4], 3, ActivationKind::LeakyRelu),
        ] {
            let p = build_model(&spec, Init::KaimingUniform, 3).unwrap();
            let x = Tensor::new(
                vec![2, spec.input[0], 4, 4],
                (0..2 * spec.input_len()).map(|i| ((i * 13) % 17) as f64 / 8.0 - 1.0).collect(),
            )
            .unwrap();
            let labels = [0, 2];
            let (_, tape) = loss_and_grads(&spec, &p, &x, &labels).unwrap();
            let mut g = Graph::new();
            let pn = constant_params(&mut g, &p);
            let xn = g.constant(x.clone());
            let fwd = spec.forward(&mut g, &pn, xn).unwrap();
            let nodes = spec.param_grads_in_graph(&mut g, &fwd, &labels).unwrap();
            for ((name, t), id) in tape.iter().zip(nodes) {
                assert!(t.max_abs_diff(g.value(id)) < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn spec_records_round_trip() {
        for spec in [
            mlp2([1, 8, 8], 16, 10, ActivationKind::Tanh),
            linear_first([3, 8, 8], 10, ActivationKind::Relu),
        ] {
            assert_eq!(ModelSpec::from_records(&spec.to_records()).unwrap(), spec);
        }
    }

    #[test]
    fn linear_first_detection() {
        assert!(linear_first([1, 8, 8], 10, ActivationKind::Relu).is_linear_first());
        assert!(mlp2([1, 8, 8], 16, 10, ActivationKind::Relu).is_linear_first());
        assert!(!cnn_s([3, 8, 8], 10, ActivationKind::Relu).is_linear_first());
    }
}
