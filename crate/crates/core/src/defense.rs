//! Client-side checks run before training on a model received from the server.
//!
//! Three stages: compare the architecture against a trusted reference, scan
//! parameters for manipulation signatures, and lint the local training setup.

use std::fmt::{self, Write as _};

use crate::fl::ClientConfig;
use crate::model::{ActivationKind, Layer, LayerSpec, ModelSpec, Params};
use crate::tensor::cosine;

/// What the client expects to receive.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSpec {
    pub hash: String,
    pub layers: Vec<LayerSpec>,
    pub input: [usize; 3],
    pub classes: usize,
    pub allowed_activations: Vec<ActivationKind>,
}

impl ReferenceSpec {
    pub fn from_spec(spec: &ModelSpec, allowed_activations: &[ActivationKind]) -> Self {
        Self {
            hash: spec.structural_hash(),
            layers: spec.layers.clone(),
            input: spec.input,
            classes: spec.classes,
            allowed_activations: allowed_activations.to_vec(),
        }
    }

    /// True when the stored hash describes the stored layers.
    pub fn is_consistent(&self) -> bool {
        let spec = ModelSpec { input: self.input, classes: self.classes, layers: self.layers.clone() };
        spec.structural_hash() == self.hash
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerDiff {
    Inserted { index: usize, layer: LayerSpec },
    Removed { index: usize, layer: LayerSpec },
    Altered { index: usize, expected: LayerSpec, found: LayerSpec },
    Header { expected: String, found: String },
    DisallowedActivation { index: usize, layer: LayerSpec },
}

impl fmt::Display for LayerDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDiff::Inserted { index, layer } => write!(f, "inserted at {index}: {layer}"),
            LayerDiff::Removed { index, layer } => write!(f, "removed at {index}: {layer}"),
            LayerDiff::Altered { index, expected, found } => {
                write!(f, "altered at {index}: expected {expected}, found {found}")
            }
            LayerDiff::Header { expected, found } => write!(f, "input/classes: expected {expected}, found {found}"),
            LayerDiff::DisallowedActivation { index, layer } => write!(f, "disallowed activation at {index}: {layer}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArchVerdict {
    Pass,
    Mismatch(Vec<LayerDiff>),
}

impl ArchVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, ArchVerdict::Pass)
    }
}

fn same_structure(a: &LayerSpec, b: &LayerSpec) -> bool {
    a.layer == b.layer
}

/// Edit script between two layer lists; adjacent remove/insert pairs become alterations.
fn diff_layers(expected: &[LayerSpec], found: &[LayerSpec]) -> Vec<LayerDiff> {
    let (n, m) = (expected.len(), found.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if same_structure(&expected[i], &found[j]) {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut raw = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && same_structure(&expected[i], &found[j]) {
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            raw.push(LayerDiff::Inserted { index: j, layer: found[j].clone() });
            j += 1;
        } else {
            raw.push(LayerDiff::Removed { index: i, layer: expected[i].clone() });
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut it = raw.into_iter().peekable();
    while let Some(d) = it.next() {
        match (&d, it.peek()) {
            (LayerDiff::Removed { layer: e, .. }, Some(LayerDiff::Inserted { index, layer: f }))
            | (LayerDiff::Inserted { index, layer: f }, Some(LayerDiff::Removed { layer: e, .. })) => {
                out.push(LayerDiff::Altered { index: *index, expected: e.clone(), found: f.clone() });
                it.next();
            }
            _ => out.push(d),
        }
    }
    out
}

/// Passes iff the structural hash matches and every activation is allowed.
pub fn validate_architecture(received: &ModelSpec, reference: &ReferenceSpec) -> ArchVerdict {
    let mut diffs = Vec::new();
    if received.structural_hash() != reference.hash {
        if received.input != reference.input || received.classes != reference.classes {
            diffs.push(LayerDiff::Header {
                expected: format!("{:?}/{}", reference.input, reference.classes),
                found: format!("{:?}/{}", received.input, received.classes),
            });
        }
        diffs.extend(diff_layers(&reference.layers, &received.layers));
        if diffs.is_empty() {
            diffs.push(LayerDiff::Header { expected: reference.hash.clone(), found: received.structural_hash() });
        }
    }
    for (index, l) in received.layers.iter().enumerate() {
        if let Layer::Activation(a) = l.layer {
            if !reference.allowed_activations.contains(&a) {
                diffs.push(LayerDiff::DisallowedActivation { index, layer: l.clone() });
            }
        }
    }
    if diffs.is_empty() {
        ArchVerdict::Pass
    } else {
        ArchVerdict::Mismatch(diffs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    /// Most weight rows of a linear layer point the same way.
    DuplicateRows,
    /// A strictly monotone bias vector much wider than an initialization.
    BiasLadder,
    /// Classifier biases far larger than the classifier weights.
    HeadSkew,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::DuplicateRows => "duplicate-rows",
            Rule::BiasLadder => "bias-ladder",
            Rule::HeadSkew => "head-skew",
        }
    }

    /// Attack family the rule points at.
    pub fn signature(self) -> &'static str {
        match self {
            Rule::DuplicateRows | Rule::BiasLadder => "imprint",
            Rule::HeadSkew => "fishing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamFlag {
    pub layer: String,
    pub rule: Rule,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanThresholds {
    pub colinear_cos: f64,
    pub colinear_fraction: f64,
    /// Multiple of the reference interquartile range a bias ladder must span.
    pub ladder_iqr_factor: f64,
    /// Multiple of the head weight RMS the head bias spread must exceed.
    pub head_spread_factor: f64,
    pub min_batch: usize,
}

impl Default for ScanThresholds {
    fn default() -> Self {
        Self { colinear_cos: 0.999, colinear_fraction: 0.5, ladder_iqr_factor: 4.0, head_spread_factor: 5.0, min_batch: 8 }
    }
}

fn colinear_fraction(w: &[f64], rows: usize, cols: usize, threshold: f64) -> f64 {
    if rows < 2 {
        return 0.0;
    }
    let row = |i: usize| &w[i * cols..(i + 1) * cols];
    let mut hit = vec![false; rows];
    for i in 0..rows {
        if hit[i] {
            continue;
        }
        for j in i + 1..rows {
            if let Some(c) = cosine(row(i), row(j)) {
                if c.abs() > threshold {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / rows as f64
}

fn strictly_monotone(b: &[f64]) -> bool {
    b.windows(2).all(|w| w[0] < w[1]) || b.windows(2).all(|w| w[0] > w[1])
}

/// Rule-based scan for imprint and fishing signatures.
pub fn scan_parameters(params: &Params, spec: &ModelSpec, th: &ScanThresholds) -> Vec<ParamFlag> {
    let mut flags = Vec::new();
    for ls in &spec.layers {
        let wname = format!("{}.weight", ls.name);
        let bname = format!("{}.bias", ls.name);
        let (Some(w), b) = (params.get(&wname), params.get(&bname)) else { continue };
        let fan_in: usize = w.shape()[1..].iter().product();
        match ls.layer {
            Layer::Linear { .. } => {
                let frac = colinear_fraction(w.data(), w.shape()[0], fan_in, th.colinear_cos);
                if frac > th.colinear_fraction {
                    flags.push(ParamFlag { layer: ls.name.clone(), rule: Rule::DuplicateRows, score: frac });
                }
            }
            Layer::Head { .. } => {
                if let Some(b) = b {
                    let spread = b.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        - b.data().iter().copied().fold(f64::INFINITY, f64::min);
                    let rms = (w.dot(w) / w.len() as f64).sqrt();
                    let score = if rms > 0.0 { spread / rms } else if spread > 0.0 { f64::INFINITY } else { 0.0 };
                    if score > th.head_spread_factor {
                        flags.push(ParamFlag { layer: ls.name.clone(), rule: Rule::HeadSkew, score });
                    }
                }
                continue;
            }
            _ => {}
        }
        if let Some(b) = b {
            let d = b.data();
            if d.len() >= 3 && strictly_monotone(d) {
                // Interquartile range of U(−a, a) with a = 1/√fan_in.
                let iqr = 1.0 / (fan_in as f64).sqrt();
                let span = (d[d.len() - 1] - d[0]).abs();
                let score = span / iqr;
                if score > th.ladder_iqr_factor {
                    flags.push(ParamFlag { layer: ls.name.clone(), rule: Rule::BiasLadder, score });
                }
            }
        }
    }
    flags
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LintRule {
    SigmoidActivation,
    SmallBatch,
    SingleEpoch,
    ClosedFormExposure,
}

impl LintRule {
    pub fn name(self) -> &'static str {
        match self {
            LintRule::SigmoidActivation => "sigmoid-activation",
            LintRule::SmallBatch => "small-batch",
            LintRule::SingleEpoch => "single-epoch",
            LintRule::ClosedFormExposure => "closed-form-exposure",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LintFinding {
    pub rule: LintRule,
    pub message: String,
}

/// Advisory findings about the local training setup.
pub fn lint_protocol(cfg: &ClientConfig, spec: &ModelSpec, min_batch: usize) -> Vec<LintFinding> {
    let mut out = Vec::new();
    if spec.activations().any(|a| a == ActivationKind::Sigmoid) {
        out.push(LintFinding {
            rule: LintRule::SigmoidActivation,
            message: "sigmoid activations keep pre-activations in a near-linear range".into(),
        });
    }
    if cfg.batch_size < min_batch {
        out.push(LintFinding {
            rule: LintRule::SmallBatch,
            message: format!("batch size {} is below {min_batch}", cfg.batch_size),
        });
    }
    if cfg.epochs == 1 {
        out.push(LintFinding {
            rule: LintRule::SingleEpoch,
            message: "a single local epoch makes the update close to one gradient".into(),
        });
    }
    if spec.is_linear_first() {
        out.push(LintFinding {
            rule: LintRule::ClosedFormExposure,
            message: "the first parameterized layer is a biased linear layer on raw input".into(),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub architecture: ArchVerdict,
    pub flags: Vec<ParamFlag>,
    pub lint: Vec<LintFinding>,
}

impl ValidationReport {
    /// Lint findings are advisory and never fail the report.
    pub fn passed(&self) -> bool {
        self.architecture.passed() && self.flags.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verdict: {}", if self.passed() { "pass" } else { "fail" });
        match &self.architecture {
            ArchVerdict::Pass => {
                let _ = writeln!(s, "architecture: pass");
            }
            ArchVerdict::Mismatch(d) => {
                let _ = writeln!(s, "architecture: mismatch");
                for x in d {
                    let _ = writeln!(s, "  - {x}");
                }
            }
        }
        let _ = writeln!(s, "parameter flags: {}", self.flags.len());
        for f in &self.flags {
            let _ = writeln!(s, "  - {} {} ({}) score {:.4}", f.layer, f.rule.name(), f.rule.signature(), f.score);
        }
        let _ = writeln!(s, "lint findings: {}", self.lint.len());
        for l in &self.lint {
            let _ = writeln!(s, "  - {}: {}", l.rule.name(), l.message);
        }
        s
    }

    pub const CSV_HEADER: &'static str = "verdict,architecture,diffs,flags,flag_rules,lint";

    pub fn to_csv_row(&self) -> String {
        let rules: Vec<String> = self.flags.iter().map(|f| format!("{}:{}", f.layer, f.rule.name())).collect();
        let lint: Vec<&str> = self.lint.iter().map(|l| l.rule.name()).collect();
        let diffs = match &self.architecture {
            ArchVerdict::Pass => 0,
            ArchVerdict::Mismatch(d) => d.len(),
        };
        format!(
            "{},{},{},{},{},{}",
            if self.passed() { "pass" } else { "fail" },
            if self.architecture.passed() { "pass" } else { "mismatch" },
            diffs,
            self.flags.len(),
            rules.join(";"),
            lint.join(";")
        )
    }
}

/// Runs all three stages.
pub fn validate(
    received: &ModelSpec,
    params: &Params,
    reference: &ReferenceSpec,
    cfg: Option<&ClientConfig>,
    th: &ScanThresholds,
) -> ValidationReport {
    ValidationReport {
        architecture: validate_architecture(received, reference),
        flags: scan_parameters(params, received, th),
        lint: cfg.map(|c| lint_protocol(c, received, th.min_batch)).unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zoo;

    #[test]
    fn activation_swap_is_an_alteration() {
        let a = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Relu);
        let mut b = a.clone();
        b.layers[1].layer = Layer::Activation(ActivationKind::Sigmoid);
        let r = ReferenceSpec::from_spec(&a, &ActivationKind::ALL);
        assert!(r.is_consistent());
        assert_eq!(validate_architecture(&a, &r), ArchVerdict::Pass);
        match validate_architecture(&b, &r) {
            ArchVerdict::Mismatch(d) => {
                assert_eq!(d.len(), 1);
                assert!(matches!(&d[0], LayerDiff::Altered { found, .. } if found.name == "act1"));
            }
            ArchVerdict::Pass => panic!("swap not detected"),
        }
    }

    #[test]
    fn monotone_detection() {
        assert!(strictly_monotone(&[1.0, 2.0, 3.0]));
        assert!(strictly_monotone(&[3.0, 2.0, 1.0]));
        assert!(!strictly_monotone(&[0.0, 0.0, 0.0]));
    }

    #[test]
    fn colinear_rows() {
        let w = [1.0, 2.0, 2.0, 4.0, -1.0, -2.0, 0.0, 1.0];
        assert_eq!(colinear_fraction(&w, 4, 2, 0.999), 0.75);
    }
}
