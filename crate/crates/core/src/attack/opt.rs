//! Gradient matching: recover inputs whose gradients reproduce a leaked update.

use std::fmt::Write as _;

use rand::Rng;

use super::{distance_node, minimize, AttackResult, Distance, Schedule};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fl::{ClientConfig, FedAvgTrace, Normalization, Update, UpdateKind};
use crate::model::{constant_params, ModelSpec, Params};
use crate::rng;
use crate::tensor::Tensor;

/// Longest local training loop the FedAvg attacks will unroll.
pub const MAX_UNROLL: usize = 64;

#[derive(Clone, Debug, PartialEq, Default)]
pub enum InitKind {
    /// Pixels drawn from `N(0.5, 0.1²)`, clamped to `[0, 1]`.
    #[default]
    Gaussian,
    /// Pixels drawn from `U(0, 1)`.
    Uniform,
    /// Explicit starting point in model space.
    Given(Tensor),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelSource {
    #[default]
    GroundTruth,
    Inferred,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpGiaConfig {
    pub distance: Distance,
    pub tv_weight: f64,
    pub schedule: Schedule,
    pub init: InitKind,
    pub seed: u64,
    pub labels: LabelSource,
    /// Project each iterate back into the `[0, 1]` pixel box.
    pub clamp: bool,
}

impl Default for OpGiaConfig {
    fn default() -> Self {
        Self {
            distance: Distance::Cosine,
            tv_weight: 1e-2,
            schedule: Schedule::new(2000, 0.1),
            init: InitKind::Gaussian,
            seed: 0,
            labels: LabelSource::GroundTruth,
            clamp: true,
        }
    }
}

impl OpGiaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0) {
            return Err(Error::Invalid(format!("tv weight must be non-negative, got {}", self.tv_weight)));
        }
        self.schedule.validate()
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "distance={} tv={} iterations={} lr={} milestones={:?} decay={} init={} seed={} labels={:?} clamp={}",
            self.distance.name(),
            self.tv_weight,
            self.schedule.iterations,
            self.schedule.lr,
            self.schedule.milestones,
            self.schedule.decay,
            match self.init {
                InitKind::Gaussian => "gaussian",
                InitKind::Uniform => "uniform",
                InitKind::Given(_) => "given",
            },
            self.seed,
            self.labels,
            self.clamp
        );
        s
    }
}

/// Starting batch in model space.
pub fn initial_batch(init: &InitKind, shape: &[usize], norm: &Normalization, seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut r = rng::stream(seed, 7);
    let px = match init {
        InitKind::Gaussian => (0..n).map(|_| (0.5 + 0.1 * rng::normal(&mut r)).clamp(0.0, 1.0)).collect(),
        InitKind::Uniform => (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        InitKind::Given(t) => {
            if t.shape() != shape {
                return Err(Error::Shape(format!("given init has shape {:?}, expected {shape:?}", t.shape())));
            }
            return Ok(t.clone());
        }
    };
    Ok(norm.normalize(&Tensor::new(shape.to_vec(), px)?))
}

/// Clamp in pixel space, staying in model space.
pub(crate) fn project_box(x: &mut Tensor, norm: &Normalization) {
    let s = x.shape().to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        let (m, sd) = (norm.mean[ch], norm.std[ch]);
        *v = v.clamp(-m / sd, (1.0 - m) / sd);
    }
}

fn head_bias_name(spec: &ModelSpec) -> Result<String> {
    match spec.head() {
        Some(h) => Ok(format!("{}.bias", h.name)),
        None => Err(Error::Spec("model has no classifier head".into())),
    }
}

/// Recovers the label of a single-sample gradient from the sign of the head bias gradient.
pub fn infer_label_single(update: &Update, spec: &ModelSpec) -> Result<usize> {
    if update.kind != UpdateKind::FedSgdGradient {
        return Err(Error::LabelInference("label inference needs a FedSGD gradient".into()));
    }
    if update.batch_size != 1 {
        return Err(Error::LabelInference(format!("batch size is {}, not 1", update.batch_size)));
    }
    let name = head_bias_name(spec)?;
    let gb = update.tensors.require(&name)?;
    let neg: Vec<usize> = gb.data().iter().enumerate().filter(|(_, &v)| v < 0.0).map(|(i, _)| i).collect();
    match neg.as_slice() {
        [only] => Ok(*only),
        [] => Err(Error::LabelInference("no negative head bias gradient entry".into())),
        _ => Err(Error::LabelInference(format!("{} negative head bias gradient entries", neg.len()))),
    }
}

fn check_update(update: &Update, spec: &ModelSpec, params: &Params) -> Result<()> {
    if !update.tensors.same_layout(params) {
        return Err(Error::Shape("update tensors do not match the model parameters".into()));
    }
    if spec.param_shapes().len() != params.len() {
        return Err(Error::Shape("parameters do not match the model".into()));
    }
    Ok(())
}

fn resolve_labels(update: &Update, spec: &ModelSpec, cfg: &OpGiaConfig, labels: Option<&[usize]>) -> Result<Vec<usize>> {
    let y = match (cfg.labels, labels) {
        (LabelSource::GroundTruth, Some(y)) => y.to_vec(),
        (LabelSource::GroundTruth, None) => {
            return Err(Error::Invalid("ground-truth label mode needs labels".into()));
        }
        (LabelSource::Inferred, _) => vec![infer_label_single(update, spec)?],
    };
    if y.len() != update.batch_size {
        return Err(Error::Invalid(format!(
            "{} labels for an update over {} samples",
            y.len(),
            update.batch_size
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= spec.classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {} classes", spec.classes)));
    }
    Ok(y)
}

fn add_tv(g: &mut Graph, obj: NodeId, x: NodeId, weight: f64) -> Result<NodeId> {
    if weight == 0.0 {
        return Ok(obj);
    }
    let tv = g.total_variation(x)?;
    let tv = g.scale(tv, weight)?;
    g.add(obj, tv)
}

/// Gradient-matching objective for a FedSGD gradient at candidate `x`.
pub fn gradient_matching_objective(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &Params,
    x: NodeId,
    labels: &[usize],
    target: &[Tensor],
    distance: Distance,
    tv_weight: f64,
) -> Result<NodeId> {
    let pn = constant_params(g, params);
    let fwd = spec.forward(g, &pn, x)?;
    let grads = spec.param_grads_in_graph(g, &fwd, labels)?;
    let d = distance_node(g, distance, &grads, target)?;
    add_tv(g, d, x, tv_weight)
}

/// Optimization-based inversion of a FedSGD gradient.
pub fn op_gia_attack(
    update: &Update,
    spec: &ModelSpec,
    params: &Params,
    cfg: &OpGiaConfig,
    labels: Option<&[usize]>,
    norm: &Normalization,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_update(update, spec, params)?;
    let y = resolve_labels(update, spec, cfg, labels)?;
    let mut shape = vec![y.len()];
    shape.extend_from_slice(&spec.input);
    let x0 = initial_batch(&cfg.init, &shape, norm, cfg.seed)?;
    let target = update.tensors.to_vec();
    let res = minimize(
        vec![x0.clone()],
        &cfg.schedule,
        |g, ids| gradient_matching_objective(g, spec, params, ids[0], &y, &target, cfg.distance, cfg.tv_weight),
        |v| {
            if cfg.clamp {
                project_box(&mut v[0], norm);
            }
        },
    )?;
    Ok(AttackResult {
        x_hat: res.best.into_iter().next().expect("one variable"),
        labels: y,
        objective: res.best_objective,
        trajectory: res.trajectory,
        init: Some(x0),
        metrics: None,
        seed: cfg.seed,
        config: cfg.echo(),
        semantic_only: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedAvgMode {
    /// Replays the true local schedule: step size, epochs, batch size and order.
    Strong,
    /// Replays a guessed schedule in sequential order.
    Weak,
    /// Treats the update as one gradient.
    None,
}

impl FedAvgMode {
    pub fn name(self) -> &'static str {
        match self {
            FedAvgMode::Strong => "strong",
            FedAvgMode::Weak => "weak",
            FedAvgMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(FedAvgMode::Strong),
            "weak" => Ok(FedAvgMode::Weak),
            "none" => Ok(FedAvgMode::None),
            _ => Err(Error::Invalid(format!("unknown fedavg mode '{s}'"))),
        }
    }
}

/// What the attacker believes about local training.
#[derive(Clone, Debug)]
pub enum ClientKnowledge<'a> {
    /// True hyperparameters and batch order.
    Trace { cfg: &'a ClientConfig, trace: &'a FedAvgTrace },
    /// Guessed hyperparameters; steps run over samples in order.
    Guess(ClientConfig),
    Nothing,
}

/// Row-selection matrix picking `idx` out of `n` rows.
fn selector(idx: &[usize], n: usize) -> Tensor {
    let mut s = Tensor::zeros(&[idx.len(), n]);
    for (r, &i) in idx.iter().enumerate() {
        s.data_mut()[r * n + i] = 1.0;
    }
    s
}

/// Local SGD unrolled in the graph; returns `θ_end − θ_start` as nodes.
pub fn simulate_delta_in_graph(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &Params,
    x: NodeId,
    labels: &[usize],
    steps: &[Vec<usize>],
    lr: f64,
) -> Result<Vec<NodeId>> {
    let n = labels.len();
    let m = spec.input_len();
    let flat = g.reshape(x, &[n, m])?;
    let start = constant_params(g, params);
    let mut theta = start.clone();
    for idx in steps {
        let xb = if idx.len() == n && idx.iter().enumerate().all(|(i, &v)| i == v) {
            x
        } else {
            let s = g.constant(selector(idx, n));
            let rows = g.matmul(s, flat)?;
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&spec.input);
            g.reshape(rows, &shape)?
        };
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let fwd = spec.forward(g, &theta, xb)?;
        let grads = spec.param_grads_in_graph(g, &fwd, &yb)?;
        let mut next = Vec::with_capacity(theta.len());
        for (&t, gr) in theta.iter().zip(grads) {
            let step = g.scale(gr, lr)?;
            next.push(g.sub(t, step)?);
        }
        theta = next;
    }
    theta.iter().zip(&start).map(|(&a, &b)| g.sub(a, b)).collect()
}

fn sequential_steps(n: usize, cfg: &ClientConfig) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (0..n).collect();
    (0..cfg.epochs).flat_map(|_| order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect()
}

/// Inverts a FedAvg model delta under the chosen knowledge model.
pub fn fedavg_attack(
    update: &Update,
    spec: &ModelSpec,
    params: &Params,
    cfg: &OpGiaConfig,
    mode: FedAvgMode,
    knowledge: ClientKnowledge<'_>,
    labels: &[usize],
    norm: &Normalization,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_update(update, spec, params)?;
    if update.kind != UpdateKind::FedAvgDelta {
        return Err(Error::Invalid("fedavg attack needs a model delta".into()));
    }
    let n = labels.len();
    if n != update.samples {
        return Err(Error::Invalid(format!("{n} labels for an update over {} samples", update.samples)));
    }
    let (steps, lr) = match (mode, &knowledge) {
        (FedAvgMode::Strong, ClientKnowledge::Trace { cfg: c, trace }) => (trace.steps.clone(), c.lr),
        (FedAvgMode::Strong, _) => {
            return Err(Error::Invalid("strong simulation needs the true client configuration and trace".into()));
        }
        (FedAvgMode::Weak, ClientKnowledge::Guess(c)) => {
            c.validate()?;
            (sequential_steps(n, c), c.lr)
        }
        (FedAvgMode::Weak, _) => return Err(Error::Invalid("weak simulation needs guessed hyperparameters".into())),
        (FedAvgMode::None, _) => {
            let eta = match &knowledge {
                ClientKnowledge::Guess(c) if c.lr > 0.0 => c.lr,
                _ => 1.0,
            };
            let g = Update {
                kind: UpdateKind::FedSgdGradient,
                tensors: update.tensors.scale(-1.0 / eta),
                batch_size: n,
                epochs: 1,
                lr: 0.0,
                samples: n,
            };
            let cfg = OpGiaConfig { labels: LabelSource::GroundTruth, ..cfg.clone() };
            let mut r = op_gia_attack(&g, spec, params, &cfg, Some(labels), norm)?;
            r.config = format!("mode=none {}", r.config);
            return Ok(r);
        }
    };
    if steps.len() > MAX_UNROLL {
        return Err(Error::Invalid(format!(
            "local training has {} steps; unrolling is limited to {MAX_UNROLL}",
            steps.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Invalid("simulated learning rate must be positive".into()));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input);
    let x0 = initial_batch(&cfg.init, &shape, norm, cfg.seed)?;
    let target = update.tensors.to_vec();
    let res = minimize(
        vec![x0.clone()],
        &cfg.schedule,
        |g, ids| {
            let delta = simulate_delta_in_graph(g, spec, params, ids[0], labels, &steps, lr)?;
            let d = distance_node(g, cfg.distance, &delta, &target)?;
            add_tv(g, d, ids[0], cfg.tv_weight)
        },
        |v| {
            if cfg.clamp {
                project_box(&mut v[0], norm);
            }
        },
    )?;
    Ok(AttackResult {
        x_hat: res.best.into_iter().next().expect("one variable"),
        labels: labels.to_vec(),
        objective: res.best_objective,
        trajectory: res.trajectory,
        init: Some(x0),
        metrics: None,
        seed: cfg.seed,
        config: format!("mode={} steps={} lr={lr} {}", mode.name(), steps.len(), cfg.echo()),
        semantic_only: false,
    })
}

/// Objective value of a candidate batch without optimizing.
pub fn matching_objective_at(
    update: &Update,
    spec: &ModelSpec,
    params: &Params,
    x: &Tensor,
    labels: &[usize],
    distance: Distance,
    tv_weight: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let target = update.tensors.to_vec();
    let obj = gradient_matching_objective(&mut g, spec, params, xn, labels, &target, distance, tv_weight)?;
    Ok(g.value(obj).item())
}

/// Scales every tensor of an update.
pub fn scaled(update: &Update, c: f64) -> Update {
    Update { tensors: update.tensors.scale(c), ..update.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::{client_gradient, synth_dataset};
    use crate::model::{build_model, zoo, ActivationKind, Init};

    fn setup(act: ActivationKind) -> (ModelSpec, Params, crate::fl::Dataset) {
        let spec = zoo::mlp2([1, 8, 8], 16, 4, act);
        let params = build_model(&spec, Init::KaimingUniform, 5).unwrap();
        let data = synth_dataset(8, 1, 8, 8, 4, 3).unwrap();
        (spec, params, data)
    }

    #[test]
    fn label_inference_single_and_batch() {
        let (spec, params, data) = setup(ActivationKind::Relu);
        for i in 0..4 {
            let x = data.norm.normalize(&data.images.slice_rows(i, 1).unwrap());
            let u = client_gradient(&spec, &params, &x, &[data.labels[i]]).unwrap();
            assert_eq!(infer_label_single(&u, &spec).unwrap(), data.labels[i]);
        }
        let x = data.norm.normalize(&data.images.slice_rows(0, 2).unwrap());
        let u = client_gradient(&spec, &params, &x, &data.labels[..2]).unwrap();
        assert!(matches!(infer_label_single(&u, &spec), Err(Error::LabelInference(_))));
    }

    #[test]
    fn fixed_point_stays_exact() {
        let (spec, params, data) = setup(ActivationKind::Sigmoid);
        let x = data.norm.normalize(&data.images.slice_rows(0, 1).unwrap());
        let u = client_gradient(&spec, &params, &x, &[0]).unwrap();
        let cfg = OpGiaConfig {
            schedule: Schedule::new(20, 0.1),
            init: InitKind::Given(x.clone()),
            tv_weight: 0.0,
            ..OpGiaConfig::default()
        };
        let r = op_gia_attack(&u, &spec, &params, &cfg, Some(&[0]), &data.norm).unwrap();
        assert!(r.trajectory[0].abs() < 1e-12);
        assert!(r.x_hat.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn cosine_objective_is_scale_blind() {
        let (spec, params, data) = setup(ActivationKind::Tanh);
        let x = data.norm.normalize(&data.images.slice_rows(0, 1).unwrap());
        let u = client_gradient(&spec, &params, &x, &[0]).unwrap();
        let cfg = OpGiaConfig { schedule: Schedule::new(30, 0.1), seed: 4, ..OpGiaConfig::default() };
        let a = op_gia_attack(&u, &spec, &params, &cfg, Some(&[0]), &data.norm).unwrap();
        let b = op_gia_attack(&scaled(&u, 7.5), &spec, &params, &cfg, Some(&[0]), &data.norm).unwrap();
        for (p, q) in a.trajectory.iter().zip(&b.trajectory) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!(a.x_hat.max_abs_diff(&b.x_hat) < 1e-6);
    }
}
