//! Analytic attacks: closed-form inversion of a first linear layer, imprint
//! binning, and classifier-bias fishing.

use rand::Rng;

use super::opt::{op_gia_attack, OpGiaConfig};
use super::AttackResult;
use crate::error::{Error, Result};
use crate::fl::{Normalization, Update, UpdateKind};
use crate::model::{ActivationKind, Layer, LayerSpec, ModelSpec, Params, TensorMap};
use crate::rng;
use crate::tensor::{cosine, Tensor};

/// Bias gradients at or below this magnitude mark a neuron inactive.
pub const TAU_ACT: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct NeuronRecon {
    pub neuron: usize,
    /// Reconstructed input in model space, shaped like one sample.
    pub x: Tensor,
}

fn first_linear(spec: &ModelSpec, layer: &str) -> Result<(usize, usize)> {
    let li = spec
        .layer_index(layer)
        .ok_or_else(|| Error::Invalid(format!("no layer named '{layer}'")))?;
    match spec.layers[li].layer {
        Layer::Linear { in_features, out_features, bias: true } => {
            if spec.first_param_layer() != Some(li) {
                return Err(Error::Invalid(format!("layer '{layer}' is not the first parameterized layer")));
            }
            Ok((in_features, out_features))
        }
        Layer::Linear { bias: false, .. } => Err(Error::Invalid(format!("layer '{layer}' has no bias"))),
        _ => Err(Error::Invalid(format!("layer '{layer}' is not a linear layer"))),
    }
}

/// `∇W_i ⊘ ∇b_i` for each neuron whose bias gradient exceeds [`TAU_ACT`].
pub fn closed_form_linear_invert(update: &Update, spec: &ModelSpec, layer: &str) -> Result<Vec<NeuronRecon>> {
    let (m, out) = first_linear(spec, layer)?;
    let gw = update.tensors.require(&format!("{layer}.weight"))?;
    let gb = update.tensors.require(&format!("{layer}.bias"))?;
    if gw.shape() != [out, m] || gb.shape() != [out] {
        return Err(Error::Shape(format!("update tensors for '{layer}' do not match the layer")));
    }
    let mut out_v = Vec::new();
    for i in 0..out {
        let b = gb.data()[i];
        if b.abs() > TAU_ACT {
            let row = gw.data()[i * m..(i + 1) * m].iter().map(|w| w / b).collect();
            out_v.push(NeuronRecon { neuron: i, x: Tensor::new(spec.input.to_vec(), row)? });
        }
    }
    Ok(out_v)
}

/// Brightness measurement and bias ladder of an imprint layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImprintModule {
    pub k: usize,
    /// Weight row shared by every neuron.
    pub h: Vec<f64>,
    /// Ascending cutoffs; neuron `i` has bias `−cutoffs[i]`.
    pub cutoffs: Vec<f64>,
    pub input: [usize; 3],
    pub layer: String,
}

pub const IMPRINT_LAYER: &str = "imprint";

impl ImprintModule {
    pub fn measure(&self, x: &[f64]) -> f64 {
        self.h.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Largest cutoff below the measurement, i.e. the sample's bin.
    pub fn bin_of(&self, x: &[f64]) -> Option<usize> {
        let v = self.measure(x);
        self.cutoffs.iter().rposition(|&c| v > c)
    }

    pub fn biases(&self) -> Vec<f64> {
        self.cutoffs.iter().map(|c| -c).collect()
    }

    pub fn to_records(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let [c, h, w] = self.input;
        m.insert("imprint.shape", Tensor::from_vec(vec![self.k as f64, c as f64, h as f64, w as f64]));
        m.insert("imprint.h", Tensor::from_vec(self.h.clone()));
        m.insert("imprint.cutoffs", Tensor::from_vec(self.cutoffs.clone()));
        m
    }

    pub fn from_records(m: &TensorMap) -> Result<Self> {
        let s = m.require("imprint.shape")?.data();
        if s.len() != 4 {
            return Err(Error::Format("imprint.shape must hold 4 values".into()));
        }
        let module = Self {
            k: s[0] as usize,
            input: [s[1] as usize, s[2] as usize, s[3] as usize],
            h: m.require("imprint.h")?.data().to_vec(),
            cutoffs: m.require("imprint.cutoffs")?.data().to_vec(),
            layer: IMPRINT_LAYER.into(),
        };
        if module.cutoffs.len() != module.k || module.h.len() != module.input.iter().product::<usize>() {
            return Err(Error::Format("imprint records are inconsistent".into()));
        }
        Ok(module)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Prepends a linear + ReLU imprint layer measuring mean brightness.
///
/// Cutoffs are the `i/k` quantiles of the calibration brightness. A bias-free
/// projection with identical columns maps the `k` outputs back to the input
/// shape so the original layers still run.
pub fn build_imprint(
    spec: &ModelSpec,
    params: &Params,
    k: usize,
    calibration: &Tensor,
    seed: u64,
) -> Result<(ModelSpec, Params, ImprintModule)> {
    if k < 2 {
        return Err(Error::Invalid(format!("imprint needs at least 2 bins, got {k}")));
    }
    spec.validate()?;
    let m = spec.input_len();
    let cs = calibration.shape();
    if cs.len() != 4 || cs[1..] != spec.input {
        return Err(Error::Shape(format!("calibration batch {cs:?} does not match input {:?}", spec.input)));
    }
    let h = vec![1.0 / m as f64; m];
    let mut levels: Vec<f64> = calibration.data().chunks(m).map(|x| h.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    levels.sort_by(f64::total_cmp);
    let mut cutoffs: Vec<f64> = (0..k).map(|i| quantile(&levels, i as f64 / k as f64)).collect();
    for i in 1..k {
        if cutoffs[i] <= cutoffs[i - 1] {
            cutoffs[i] = cutoffs[i - 1] + 1e-9 * (1.0 + cutoffs[i - 1].abs());
        }
    }
    let module = ImprintModule { k, h: h.clone(), cutoffs, input: spec.input, layer: IMPRINT_LAYER.into() };

    let mut layers = vec![
        LayerSpec { name: "imprint_flatten".into(), layer: Layer::Flatten },
        LayerSpec { name: IMPRINT_LAYER.into(), layer: Layer::Linear { in_features: m, out_features: k, bias: true } },
        LayerSpec { name: "imprint_act".into(), layer: Layer::Activation(ActivationKind::Relu) },
        LayerSpec { name: "imprint_proj".into(), layer: Layer::Linear { in_features: k, out_features: m, bias: false } },
        LayerSpec { name: "imprint_unflatten".into(), layer: Layer::Reshape { shape: spec.input.to_vec() } },
    ];
    layers.extend(spec.layers.iter().cloned());
    let new_spec = ModelSpec::new(spec.input, spec.classes, layers)?;

    let mut r = rng::stream(seed, 11);
    let v: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0) / k as f64).collect();
    let mut proj = Vec::with_capacity(m * k);
    for &vj in &v {
        proj.extend(std::iter::repeat_n(vj, k));
    }
    let mut weight = Vec::with_capacity(k * m);
    for _ in 0..k {
        weight.extend_from_slice(&h);
    }
    let mut new_params = Params::new();
    new_params.insert(format!("{IMPRINT_LAYER}.weight"), Tensor::new(vec![k, m], weight)?);
    new_params.insert(format!("{IMPRINT_LAYER}.bias"), Tensor::from_vec(module.biases()));
    new_params.insert("imprint_proj.weight", Tensor::new(vec![m, k], proj)?);
    for (name, t) in params.iter() {
        new_params.insert(name, t.clone());
    }
    if new_params.len() != new_spec.param_shapes().len() {
        return Err(Error::Spec("model already contains imprint layers".into()));
    }
    Ok((new_spec, new_params, module))
}

#[derive(Clone, Debug)]
pub struct BinRecon {
    pub bin: usize,
    pub x: Tensor,
}

/// Differences of adjacent bins, divided entry-wise; empty bins are skipped.
pub fn imprint_reconstruct(update: &Update, module: &ImprintModule) -> Result<Vec<BinRecon>> {
    let m = module.h.len();
    let gw = update.tensors.require(&format!("{}.weight", module.layer))?;
    let gb = update.tensors.require(&format!("{}.bias", module.layer))?;
    if gw.shape() != [module.k, m] || gb.shape() != [module.k] {
        return Err(Error::Shape(format!(
            "imprint update has shapes {:?} and {:?}, module expects [{}, {m}] and [{}]",
            gw.shape(),
            gb.shape(),
            module.k,
            module.k
        )));
    }
    let (w, b) = (gw.data(), gb.data());
    let mut out = Vec::new();
    for i in 0..module.k {
        let (db, row): (f64, Vec<f64>) = if i + 1 < module.k {
            (b[i] - b[i + 1], (0..m).map(|j| w[i * m + j] - w[(i + 1) * m + j]).collect())
        } else {
            (b[i], w[i * m..(i + 1) * m].to_vec())
        };
        if db.abs() > TAU_ACT {
            out.push(BinRecon { bin: i, x: Tensor::new(module.input.to_vec(), row.iter().map(|v| v / db).collect())? });
        }
    }
    Ok(out)
}

/// For each ground-truth sample, whether some reconstruction matches it within `tol` max-abs.
pub fn exact_recoveries(recons: &[BinRecon], truth: &Tensor, tol: f64) -> Vec<bool> {
    let m: usize = truth.shape()[1..].iter().product();
    truth
        .data()
        .chunks(m)
        .map(|x| {
            recons.iter().any(|r| r.x.data().iter().zip(x).all(|(a, b)| (a - b).abs() < tol))
        })
        .collect()
}

/// Number of bins holding exactly one sample.
pub fn singly_occupied(module: &ImprintModule, truth: &Tensor) -> usize {
    let m = module.h.len();
    let mut counts = vec![0usize; module.k];
    for x in truth.data().chunks(m) {
        if let Some(b) = module.bin_of(x) {
            counts[b] += 1;
        }
    }
    counts.iter().filter(|&&c| c == 1).count()
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Main summation term of the expected exact-recovery count for `k > B > 2`.
pub fn recovery_main_sum(b: usize, k: usize) -> Option<f64> {
    if !(k > b && b > 2) {
        return None;
    }
    let mut total = 0.0;
    for i in 1..=b - 2 {
        let inner: f64 = (1..=(b - i) / 2).map(|j| binom(k - i, j) * binom(b - i - j - 1, j - 1)).sum();
        total += i as f64 * binom(k, i) * inner;
    }
    Some(total / binom(k + b - 1, k - 1))
}

/// Exact expectation when balls land in bins independently and uniformly.
pub fn expected_singletons_uniform(b: usize, k: usize) -> f64 {
    b as f64 * (1.0 - 1.0 / k as f64).powi(b as i32 - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryEstimate {
    pub b: usize,
    pub k: usize,
    pub main_sum: Option<f64>,
    /// Correction estimated as an independent simulation mean minus the main sum.
    pub correction: Option<f64>,
    pub correction_se: Option<f64>,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub trials: usize,
}

fn simulate_singletons(b: usize, k: usize, trials: usize, seed: u64, stream: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, stream);
    let mut counts = vec![0u32; k];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..b {
            counts[r.random_range(0..k)] += 1;
        }
        let s = counts.iter().filter(|&&c| c == 1).count() as f64;
        sum += s;
        sq += s * s;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 { (sq - n * mean * mean) / (n - 1.0) } else { 0.0 };
    (mean, (var.max(0.0) / n).sqrt())
}

/// Closed-form main sum plus simulated estimates of the expected exact recoveries.
pub fn expected_recovery_count(b: usize, k: usize, trials: usize, seed: u64) -> Result<RecoveryEstimate> {
    if b == 0 || k == 0 || trials == 0 {
        return Err(Error::Invalid("batch size, bin count and trials must be positive".into()));
    }
    if b == 1 {
        return Ok(RecoveryEstimate {
            b,
            k,
            main_sum: None,
            correction: None,
            correction_se: None,
            mc_mean: 1.0,
            mc_se: 0.0,
            trials,
        });
    }
    let (mc_mean, mc_se) = simulate_singletons(b, k, trials, seed, 1);
    let main_sum = recovery_main_sum(b, k);
    let (correction, correction_se) = match main_sum {
        Some(ms) => {
            let (m2, se2) = simulate_singletons(b, k, trials, seed, 2);
            (Some(m2 - ms), Some(se2))
        }
        None => (None, None),
    };
    Ok(RecoveryEstimate { b, k, main_sum, correction, correction_se, mc_mean, mc_se, trials })
}

/// Classifier-head manipulation and the state it replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct FishingPlan {
    pub target: usize,
    pub beta: f64,
    pub head: String,
    /// Head tensors before manipulation.
    pub snapshot: TensorMap,
}

impl FishingPlan {
    pub fn restore(&self, params: &Params) -> Params {
        let mut p = params.clone();
        for (name, t) in self.snapshot.iter() {
            if let Some(slot) = p.get_mut(name) {
                *slot = t.clone();
            }
        }
        p
    }

    pub fn to_records(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("fishing.plan", Tensor::from_vec(vec![self.target as f64, self.beta]));
        for (name, t) in self.snapshot.iter() {
            m.insert(format!("fishing.snapshot.{name}"), t.clone());
        }
        m
    }
}

/// Shifts classifier biases by `+β` for every class except `target`, which gets `−β`.
pub fn fishing_manipulate(spec: &ModelSpec, params: &Params, target: usize, beta: f64) -> Result<(FishingPlan, Params)> {
    if target >= spec.classes {
        return Err(Error::Invalid(format!("target class {target} out of range for {} classes", spec.classes)));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Invalid(format!("β must be non-negative, got {beta}")));
    }
    let head = spec.head().ok_or_else(|| Error::Spec("model has no classifier head".into()))?.name.clone();
    let bname = format!("{head}.bias");
    let wname = format!("{head}.weight");
    let mut snapshot = TensorMap::new();
    snapshot.insert(wname.clone(), params.require(&wname)?.clone());
    snapshot.insert(bname.clone(), params.require(&bname)?.clone());
    let mut p = params.clone();
    if beta > 0.0 {
        let b = p.get_mut(&bname).expect("checked above");
        for (c, v) in b.data_mut().iter_mut().enumerate() {
            *v += if c == target { -beta } else { beta };
        }
    }
    Ok((FishingPlan { target, beta, head, snapshot }, p))
}

/// Cosine similarity between two updates flattened in parameter order.
pub fn isolation_score(batch: &Update, single: &Update) -> Result<f64> {
    if !batch.tensors.same_layout(&single.tensors) {
        return Err(Error::Shape("updates have different tensor names or shapes".into()));
    }
    cosine(&batch.tensors.flatten(), &single.tensors.flatten())
        .ok_or_else(|| Error::Invalid("isolation score of a zero-norm update".into()))
}

/// Inverts the isolated sample: the batch gradient times `B` approximates its gradient.
pub fn fishing_then_invert(
    update: &Update,
    spec: &ModelSpec,
    manipulated: &Params,
    plan: &FishingPlan,
    cfg: &OpGiaConfig,
    norm: &Normalization,
) -> Result<AttackResult> {
    if update.kind != UpdateKind::FedSgdGradient {
        return Err(Error::Invalid("fishing inversion needs a FedSGD gradient".into()));
    }
    let single = Update {
        tensors: update.tensors.scale(update.batch_size as f64),
        batch_size: 1,
        samples: 1,
        ..update.clone()
    };
    let cfg = OpGiaConfig { labels: super::opt::LabelSource::GroundTruth, ..cfg.clone() };
    let mut r = op_gia_attack(&single, spec, manipulated, &cfg, Some(&[plan.target]), norm)?;
    r.config = format!("fishing target={} beta={} {}", plan.target, plan.beta, r.config);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_calibration_gives_even_cutoffs() {
        let spec = crate::model::zoo::mlp2([1, 2, 2], 4, 2, ActivationKind::Relu);
        let params = crate::model::build_model(&spec, crate::model::Init::KaimingUniform, 1).unwrap();
        let n = 101;
        let cal = Tensor::new(vec![n, 1, 2, 2], (0..n).flat_map(|i| [i as f64 / 100.0; 4]).collect()).unwrap();
        let (_, _, module) = build_imprint(&spec, &params, 4, &cal, 0).unwrap();
        for (c, want) in module.cutoffs.iter().zip([0.0, 0.25, 0.5, 0.75]) {
            assert!((c - want).abs() < 1e-12);
        }
        assert!(build_imprint(&spec, &params, 1, &cal, 0).is_err());
    }

    #[test]
    fn main_sum_values() {
        assert_eq!(recovery_main_sum(2, 8), None);
        let v = recovery_main_sum(4, 16).unwrap();
        assert!(v > 0.0 && v < 4.0);
    }

    #[test]
    fn single_ball_is_always_recovered() {
        let e = expected_recovery_count(1, 5, 10, 0).unwrap();
        assert_eq!(e.mc_mean, 1.0);
    }
}
