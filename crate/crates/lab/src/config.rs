//! Experiment configuration: a TOML document with one section per block.
//!
//! Fields left out fall back to per-kind defaults so a config only has to
//! name what it changes. See `docs/config.md` for the grammar.

use std::fmt;
use std::path::{Path, PathBuf};

use gia_core::attack::opt::FedAvgMode;
use gia_core::attack::Distance;
use gia_core::model::{zoo::Arch, ActivationKind, Init};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { location: location.into(), message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    OpGia,
    Fedavg,
    GenZ,
    GenW,
    Lti,
    ClosedForm,
    Imprint,
    Fishing,
    Defense,
    MetricsAnalysis,
}

impl Kind {
    pub const ALL: [Kind; 10] = [
        Kind::OpGia,
        Kind::Fedavg,
        Kind::GenZ,
        Kind::GenW,
        Kind::Lti,
        Kind::ClosedForm,
        Kind::Imprint,
        Kind::Fishing,
        Kind::Defense,
        Kind::MetricsAnalysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::OpGia => "op-gia",
            Kind::Fedavg => "fedavg",
            Kind::GenZ => "gen-z",
            Kind::GenW => "gen-w",
            Kind::Lti => "lti",
            Kind::ClosedForm => "closed-form",
            Kind::Imprint => "imprint",
            Kind::Fishing => "fishing",
            Kind::Defense => "defense",
            Kind::MetricsAnalysis => "metrics-analysis",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    #[default]
    Synth,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Artifact {
    #[default]
    Clean,
    Imprint,
    Fishing,
}

impl Artifact {
    pub fn name(self) -> &'static str {
        match self {
            Artifact::Clean => "clean",
            Artifact::Imprint => "imprint",
            Artifact::Fishing => "fishing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    #[serde(default)]
    pub source: Source,
    /// CIFAR-10 binary batch; required when `source = "cifar10"`.
    pub path: Option<PathBuf>,
    pub size: Option<usize>,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default = "eight")]
    pub resolution: usize,
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default)]
    pub family: u64,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        Self { source: Source::Synth, path: None, size: None, channels: 3, resolution: 8, classes: 10, family: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub arch: Option<String>,
    pub activation: Option<String>,
    pub hidden: Option<usize>,
    /// `kaiming-uniform`, `kaiming-uniform-relu` or `scaled`.
    pub init: Option<String>,
    pub gain: Option<f64>,
    pub trained: Option<bool>,
    pub train_epochs: Option<usize>,
    pub train_size: Option<usize>,
    pub train_lr: Option<f64>,
    pub train_batch: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBlock {
    pub batch_size: Option<usize>,
    pub distance: Option<String>,
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub tv_weight: Option<f64>,
    /// Same-label samples in a constructed batch; unset samples the batch at random.
    pub duplicates: Option<usize>,
    pub mode: Option<String>,
    pub guess_batch: Option<usize>,
    pub guess_epochs: Option<usize>,
    pub guess_lr: Option<f64>,
    pub bins: Option<usize>,
    pub calibration_size: Option<usize>,
    pub beta: Option<f64>,
    pub target: Option<usize>,
    pub latent: Option<usize>,
    pub decoder_epochs: Option<usize>,
    pub aux_size: Option<usize>,
    pub aux_family: Option<u64>,
    pub inversion_hidden: Option<Vec<usize>>,
    pub inversion_lr: Option<f64>,
    pub inversion_epochs: Option<usize>,
    pub inversion_batch: Option<usize>,
    pub eval_samples: Option<usize>,
    #[serde(default)]
    pub noise_gradient: bool,
    pub artifact: Option<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientBlock {
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "two")]
    pub epochs: usize,
    #[serde(default = "client_lr")]
    pub lr: f64,
    #[serde(default = "four")]
    pub samples: usize,
}

impl Default for ClientBlock {
    fn default() -> Self {
        Self { batch_size: 1, epochs: 2, lr: 0.05, samples: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default)]
    pub batch_size: Vec<usize>,
    #[serde(default)]
    pub resolution: Vec<usize>,
    #[serde(default)]
    pub duplicates: Vec<usize>,
    #[serde(default)]
    pub activation: Vec<String>,
    #[serde(default)]
    pub trained: Vec<bool>,
    #[serde(default)]
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub mode: Vec<String>,
    #[serde(default)]
    pub arch: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "yes")]
    pub dump_images: bool,
    #[serde(default)]
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub attack: AttackBlock,
    #[serde(default)]
    pub client: ClientBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn eight() -> usize {
    8
}
fn ten() -> usize {
    10
}
fn yes() -> bool {
    true
}
fn client_lr() -> f64 {
    0.05
}
fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![11, 23, 37, 41, 53]
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// Everything a single case needs, with defaults and axis overrides applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub kind: Kind,
    pub source: Source,
    pub path: Option<PathBuf>,
    pub data_size: usize,
    pub channels: usize,
    pub resolution: usize,
    pub classes: usize,
    pub family: u64,
    pub arch: Arch,
    pub activation: ActivationKind,
    pub hidden: usize,
    pub init: Init,
    pub trained: bool,
    pub train_epochs: usize,
    pub train_size: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub batch_size: usize,
    pub distance: Distance,
    pub iterations: usize,
    pub lr: f64,
    pub tv_weight: f64,
    pub duplicates: Option<usize>,
    pub mode: FedAvgMode,
    pub guess_batch: usize,
    pub guess_epochs: usize,
    pub guess_lr: f64,
    pub bins: usize,
    pub calibration_size: usize,
    pub beta: f64,
    pub target: Option<usize>,
    pub latent: usize,
    pub decoder_epochs: usize,
    pub aux_size: usize,
    pub aux_family: u64,
    pub inversion_hidden: Vec<usize>,
    pub inversion_lr: f64,
    pub inversion_epochs: usize,
    pub inversion_batch: usize,
    pub eval_samples: usize,
    pub noise_gradient: bool,
    pub artifact: Artifact,
    pub client_batch: usize,
    pub client_epochs: usize,
    pub client_lr: f64,
    pub client_samples: usize,
}

/// One point of the sweep grid; `None` keeps the configured value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CasePoint {
    pub batch_size: Option<usize>,
    pub resolution: Option<usize>,
    pub duplicates: Option<usize>,
    pub activation: Option<ActivationKind>,
    pub trained: Option<bool>,
    pub epochs: Option<usize>,
    pub mode: Option<FedAvgMode>,
    pub arch: Option<Arch>,
}

impl CasePoint {
    /// Stable identifier built from the axis values that are set.
    pub fn id(&self) -> String {
        let mut parts = Vec::new();
        if let Some(a) = self.arch {
            parts.push(a.name().to_string());
        }
        if let Some(a) = self.activation {
            parts.push(a.name().to_string());
        }
        if let Some(b) = self.batch_size {
            parts.push(format!("b{b}"));
        }
        if let Some(r) = self.resolution {
            parts.push(format!("r{r}"));
        }
        if let Some(d) = self.duplicates {
            parts.push(format!("d{d}"));
        }
        if let Some(t) = self.trained {
            parts.push(if t { "trained" } else { "untrained" }.to_string());
        }
        if let Some(e) = self.epochs {
            parts.push(format!("e{e}"));
        }
        if let Some(m) = self.mode {
            parts.push(m.name().to_string());
        }
        if parts.is_empty() {
            "default".into()
        } else {
            parts.join("-")
        }
    }
}

fn parse_activation(s: &str, loc: &str) -> Result<ActivationKind, ConfigError> {
    ActivationKind::parse(s).map_err(|e| invalid(loc, e.to_string()))
}

fn parse_arch(s: &str, loc: &str) -> Result<Arch, ConfigError> {
    Arch::parse(s).map_err(|e| invalid(loc, e.to_string()))
}

fn parse_mode(s: &str, loc: &str) -> Result<FedAvgMode, ConfigError> {
    FedAvgMode::parse(s).map_err(|e| invalid(loc, e.to_string()))
}

/// Per-kind starting points; these are the settings the trend suite uses.
struct KindDefaults {
    arch: Arch,
    activation: ActivationKind,
    init: Init,
    data_size: usize,
    batch_size: usize,
    distance: Distance,
    iterations: usize,
    lr: f64,
    tv_weight: f64,
    trained: bool,
    train_epochs: usize,
    train_size: usize,
    aux_size: usize,
}

fn kind_defaults(kind: Kind) -> KindDefaults {
    let base = KindDefaults {
        arch: Arch::CnnS,
        activation: ActivationKind::Relu,
        init: Init::KaimingUniform,
        data_size: 64,
        batch_size: 1,
        distance: Distance::Cosine,
        iterations: 200,
        lr: 0.1,
        tv_weight: 1e-4,
        trained: false,
        train_epochs: 5,
        train_size: 256,
        aux_size: 512,
    };
    match kind {
        Kind::GenW | Kind::GenZ => KindDefaults {
            activation: ActivationKind::Sigmoid,
            init: Init::Scaled(1.5),
            distance: Distance::L2,
            iterations: if kind == Kind::GenW { 100 } else { 200 },
            lr: if kind == Kind::GenW { 0.005 } else { 0.05 },
            tv_weight: 1e-3,
            ..base
        },
        Kind::Lti => KindDefaults { arch: Arch::Mlp2, data_size: 32, train_epochs: 10, train_size: 512, aux_size: 400, ..base },
        Kind::Fishing => KindDefaults { arch: Arch::Mlp2, data_size: 80, batch_size: 8, trained: true, train_epochs: 10, train_size: 512, ..base },
        Kind::ClosedForm => KindDefaults { arch: Arch::LinearFirst, ..base },
        Kind::Imprint => KindDefaults { data_size: 256, batch_size: 16, ..base },
        Kind::MetricsAnalysis => KindDefaults { data_size: 80, batch_size: 4, ..base },
        _ => base,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}")
                }
                None => "config".to_string(),
            };
            invalid(location, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e.location), e.message))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(invalid("name", "must be non-empty and free of '/', '\\' and ','"));
        }
        if self.dataset.source == Source::Cifar10 && self.dataset.path.is_none() {
            return Err(invalid("dataset.path", "required for the cifar10 source"));
        }
        let s = &self.sweep;
        let allowed: &[(&str, bool)] = &[
            ("sweep.batch_size", !s.batch_size.is_empty()),
            ("sweep.resolution", !s.resolution.is_empty()),
            ("sweep.duplicates", !s.duplicates.is_empty()),
            ("sweep.activation", !s.activation.is_empty()),
            ("sweep.trained", !s.trained.is_empty()),
            ("sweep.epochs", !s.epochs.is_empty()),
            ("sweep.mode", !s.mode.is_empty()),
            ("sweep.arch", !s.arch.is_empty()),
        ];
        for &(axis, used) in allowed {
            if used && !axis_applies(self.kind, axis) {
                return Err(invalid(axis, format!("axis does not apply to kind {}", self.kind.name())));
            }
        }
        for (i, a) in s.activation.iter().enumerate() {
            parse_activation(a, &format!("sweep.activation[{i}]"))?;
        }
        for (i, a) in s.arch.iter().enumerate() {
            parse_arch(a, &format!("sweep.arch[{i}]"))?;
        }
        for (i, m) in s.mode.iter().enumerate() {
            parse_mode(m, &format!("sweep.mode[{i}]"))?;
        }
        if s.batch_size.contains(&0) {
            return Err(invalid("sweep.batch_size", "batch sizes must be positive"));
        }
        if s.resolution.iter().any(|&r| r < 2) {
            return Err(invalid("sweep.resolution", "resolutions must be at least 2"));
        }
        if s.epochs.contains(&0) {
            return Err(invalid("sweep.epochs", "epochs must be positive"));
        }
        // Resolving every grid point surfaces per-block errors up front.
        for p in self.points() {
            self.resolve(&p)?;
        }
        Ok(())
    }

    /// Cartesian product of the sweep axes; no axes gives one default point.
    pub fn points(&self) -> Vec<CasePoint> {
        let s = &self.sweep;
        let mut pts = vec![CasePoint::default()];
        fn expand<T: Clone>(pts: Vec<CasePoint>, vals: &[T], set: impl Fn(&mut CasePoint, T)) -> Vec<CasePoint> {
            if vals.is_empty() {
                return pts;
            }
            pts.into_iter()
                .flat_map(|p| {
                    vals.iter().map(|v| {
                        let mut q = p.clone();
                        set(&mut q, v.clone());
                        q
                    })
                    .collect::<Vec<_>>()
                })
                .collect()
        }
        let archs: Vec<Arch> = s.arch.iter().filter_map(|a| Arch::parse(a).ok()).collect();
        let acts: Vec<ActivationKind> = s.activation.iter().filter_map(|a| ActivationKind::parse(a).ok()).collect();
        let modes: Vec<FedAvgMode> = s.mode.iter().filter_map(|m| FedAvgMode::parse(m).ok()).collect();
        pts = expand(pts, &archs, |p, v| p.arch = Some(v));
        pts = expand(pts, &acts, |p, v| p.activation = Some(v));
        pts = expand(pts, &s.batch_size, |p, v| p.batch_size = Some(v));
        pts = expand(pts, &s.resolution, |p, v| p.resolution = Some(v));
        pts = expand(pts, &s.duplicates, |p, v| p.duplicates = Some(v));
        pts = expand(pts, &s.trained, |p, v| p.trained = Some(v));
        pts = expand(pts, &s.epochs, |p, v| p.epochs = Some(v));
        pts = expand(pts, &modes, |p, v| p.mode = Some(v));
        pts
    }

    /// Applies kind defaults and the point's overrides.
    pub fn resolve(&self, p: &CasePoint) -> Result<Resolved, ConfigError> {
        let d = kind_defaults(self.kind);
        let m = &self.model;
        let a = &self.attack;
        let arch = match (p.arch, &m.arch) {
            (Some(x), _) => x,
            (None, Some(s)) => parse_arch(s, "model.arch")?,
            (None, None) => d.arch,
        };
        let activation = match (p.activation, &m.activation) {
            (Some(x), _) => x,
            (None, Some(s)) => parse_activation(s, "model.activation")?,
            (None, None) => d.activation,
        };
        let init = match m.init.as_deref() {
            None => match m.gain {
                Some(g) => Init::Scaled(g),
                None => d.init,
            },
            Some("kaiming-uniform") => Init::KaimingUniform,
            Some("kaiming-uniform-relu") => Init::KaimingUniformRelu,
            Some("scaled") => Init::Scaled(m.gain.unwrap_or(1.0)),
            Some(other) => return Err(invalid("model.init", format!("unknown init '{other}'"))),
        };
        if let Init::Scaled(g) = init {
            if !(g.is_finite() && g > 0.0) {
                return Err(invalid("model.gain", "must be positive"));
            }
        }
        let distance = match &a.distance {
            Some(s) => Distance::parse(s).map_err(|e| invalid("attack.distance", e.to_string()))?,
            None => d.distance,
        };
        let mode = match (p.mode, &a.mode) {
            (Some(x), _) => x,
            (None, Some(s)) => parse_mode(s, "attack.mode")?,
            (None, None) => FedAvgMode::Strong,
        };
        let client_epochs = p.epochs.unwrap_or(self.client.epochs);
        let r = Resolved {
            kind: self.kind,
            source: self.dataset.source,
            path: self.dataset.path.clone(),
            data_size: self.dataset.size.unwrap_or(d.data_size),
            channels: self.dataset.channels,
            resolution: p.resolution.unwrap_or(self.dataset.resolution),
            classes: self.dataset.classes,
            family: self.dataset.family,
            arch,
            activation,
            hidden: m.hidden.unwrap_or(32),
            init,
            trained: p.trained.or(m.trained).unwrap_or(d.trained),
            train_epochs: m.train_epochs.unwrap_or(d.train_epochs),
            train_size: m.train_size.unwrap_or(d.train_size),
            train_lr: m.train_lr.unwrap_or(0.05),
            train_batch: m.train_batch.unwrap_or(16),
            batch_size: p.batch_size.or(a.batch_size).unwrap_or(d.batch_size),
            distance,
            iterations: a.iterations.unwrap_or(d.iterations),
            lr: a.lr.unwrap_or(d.lr),
            tv_weight: a.tv_weight.unwrap_or(d.tv_weight),
            duplicates: p.duplicates.or(a.duplicates),
            mode,
            guess_batch: a.guess_batch.unwrap_or(self.client.batch_size),
            guess_epochs: a.guess_epochs.unwrap_or(client_epochs),
            guess_lr: a.guess_lr.unwrap_or(self.client.lr / 2.0),
            bins: a.bins.unwrap_or(128),
            calibration_size: a.calibration_size.unwrap_or(512),
            beta: a.beta.unwrap_or(10.0),
            target: a.target,
            latent: a.latent.unwrap_or(16),
            decoder_epochs: a.decoder_epochs.unwrap_or(30),
            aux_size: a.aux_size.unwrap_or(d.aux_size),
            aux_family: a.aux_family.unwrap_or(0),
            inversion_hidden: a.inversion_hidden.clone().unwrap_or_else(|| vec![128]),
            inversion_lr: a.inversion_lr.unwrap_or(0.002),
            inversion_epochs: a.inversion_epochs.unwrap_or(15),
            inversion_batch: a.inversion_batch.unwrap_or(32),
            eval_samples: a.eval_samples.unwrap_or(32),
            noise_gradient: a.noise_gradient,
            artifact: a.artifact.unwrap_or_default(),
            client_batch: self.client.batch_size,
            client_epochs,
            client_lr: self.client.lr,
            client_samples: self.client.samples,
        };
        r.check()?;
        Ok(r)
    }
}

fn axis_applies(kind: Kind, axis: &str) -> bool {
    use Kind::*;
    match axis {
        "sweep.arch" | "sweep.activation" | "sweep.trained" => true,
        "sweep.batch_size" => !matches!(kind, Fedavg | Lti),
        "sweep.resolution" => true,
        "sweep.duplicates" => matches!(kind, OpGia | MetricsAnalysis),
        "sweep.epochs" => matches!(kind, Fedavg | Defense),
        "sweep.mode" => kind == Fedavg,
        _ => false,
    }
}

impl Resolved {
    fn check(&self) -> Result<(), ConfigError> {
        let pos = |v: usize, loc: &str| if v == 0 { Err(invalid(loc, "must be positive")) } else { Ok(()) };
        let posf = |v: f64, loc: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(loc, "must be a positive number"))
            }
        };
        pos(self.data_size, "dataset.size")?;
        pos(self.channels, "dataset.channels")?;
        pos(self.classes, "dataset.classes")?;
        if self.resolution < 2 {
            return Err(invalid("dataset.resolution", "must be at least 2"));
        }
        if self.source == Source::Cifar10 && (self.channels != 3 || self.resolution != 32 || self.classes != 10) {
            return Err(invalid("dataset", "cifar10 images are 3x32x32 with 10 classes"));
        }
        pos(self.hidden, "model.hidden")?;
        pos(self.batch_size, "attack.batch_size")?;
        pos(self.iterations, "attack.iterations")?;
        posf(self.lr, "attack.lr")?;
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(invalid("attack.tv_weight", "must be a non-negative number"));
        }
        if self.batch_size > self.data_size && !matches!(self.kind, Kind::Fedavg | Kind::Lti | Kind::Defense) {
            return Err(invalid("attack.batch_size", format!("batch {} exceeds dataset size {}", self.batch_size, self.data_size)));
        }
        if let Some(d) = self.duplicates {
            if d > self.batch_size {
                return Err(invalid("attack.duplicates", format!("{d} duplicates exceed batch size {}", self.batch_size)));
            }
        }
        if self.kind == Kind::MetricsAnalysis && self.batch_size < 2 {
            return Err(invalid("attack.batch_size", "gradient similarity needs at least 2 samples"));
        }
        if self.kind == Kind::Imprint && self.bins < 2 {
            return Err(invalid("attack.bins", "at least 2 bins are required"));
        }
        if let Some(t) = self.target {
            if t >= self.classes {
                return Err(invalid("attack.target", format!("class {t} out of range for {} classes", self.classes)));
            }
        }
        if self.kind == Kind::Fishing && self.batch_size > self.classes {
            // One target sample plus others drawn from distinct non-target classes.
            return Err(invalid("attack.batch_size", "fishing batches hold at most one sample per class"));
        }
        posf(self.beta, "attack.beta")?;
        pos(self.latent, "attack.latent")?;
        pos(self.aux_size, "attack.aux_size")?;
        pos(self.eval_samples, "attack.eval_samples")?;
        pos(self.inversion_batch, "attack.inversion_batch")?;
        posf(self.inversion_lr, "attack.inversion_lr")?;
        posf(self.guess_lr, "attack.guess_lr")?;
        pos(self.guess_batch, "attack.guess_batch")?;
        pos(self.guess_epochs, "attack.guess_epochs")?;
        pos(self.client_batch, "client.batch_size")?;
        pos(self.client_epochs, "client.epochs")?;
        pos(self.client_samples, "client.samples")?;
        posf(self.client_lr, "client.lr")?;
        pos(self.train_batch, "model.train_batch")?;
        posf(self.train_lr, "model.train_lr")?;
        Ok(())
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_kind_defaults() {
        let c = ExperimentConfig::from_toml("kind = \"gen-w\"\n").unwrap();
        assert_eq!(c.seeds, vec![11, 23, 37, 41, 53]);
        let pts = c.points();
        assert_eq!(pts, vec![CasePoint::default()]);
        let r = c.resolve(&pts[0]).unwrap();
        assert_eq!(r.activation, ActivationKind::Sigmoid);
        assert_eq!(r.distance, Distance::L2);
        assert_eq!(r.init, Init::Scaled(1.5));
    }

    #[test]
    fn sweep_is_cartesian() {
        let c = ExperimentConfig::from_toml(
            "kind = \"op-gia\"\n[sweep]\nbatch_size = [1, 4]\nactivation = [\"relu\", \"tanh\", \"sigmoid\"]\n",
        )
        .unwrap();
        let pts = c.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].id(), "relu-b1");
        assert_eq!(pts[5].id(), "sigmoid-b4");
    }

    #[test]
    fn parse_errors_carry_a_location() {
        let e = ExperimentConfig::from_toml("kind = \"op-gia\"\n[attack]\niterations = \"many\"\n").unwrap_err();
        assert!(e.location.starts_with("line 3"), "{e}");
        let e = ExperimentConfig::from_toml("kind = \"op-gia\"\n[attack]\nbogus = 1\n").unwrap_err();
        assert!(e.location.starts_with("line 3"), "{e}");
        let e = ExperimentConfig::from_toml("kind = \"op-gia\"\n[sweep]\nactivation = [\"gelu\"]\n").unwrap_err();
        assert_eq!(e.location, "sweep.activation[0]");
        let e = ExperimentConfig::from_toml("kind = \"lti\"\n[sweep]\nmode = [\"weak\"]\n").unwrap_err();
        assert_eq!(e.location, "sweep.mode");
        let e = ExperimentConfig::from_toml("kind = \"op-gia\"\nseeds = []\n").unwrap_err();
        assert_eq!(e.location, "seeds");
    }

    #[test]
    fn duplicates_cannot_exceed_batch() {
        let e = ExperimentConfig::from_toml("kind = \"op-gia\"\n[attack]\nbatch_size = 2\nduplicates = 3\n").unwrap_err();
        assert_eq!(e.location, "attack.duplicates");
    }
}
