//! One sweep case per call: build the data, the target and the observation,
//! run the attack or check, and score it.

use gia_core::attack::ana::{
    build_imprint, closed_form_linear_invert, exact_recoveries, fishing_manipulate, fishing_then_invert, imprint_reconstruct,
    isolation_score, singly_occupied,
};
use gia_core::attack::gen::{
    gen_w_attack, invert_with_model, latent_z_attack, pretrain_decoder, train_inversion_model, GeneratorSpec, InversionConfig,
};
use gia_core::attack::opt::{fedavg_attack, op_gia_attack, ClientKnowledge, FedAvgMode, OpGiaConfig};
use gia_core::attack::{AttackResult, Schedule};
use gia_core::defense::{validate, ReferenceSpec, ScanThresholds};
use gia_core::fl::{
    client_gradient, fedavg_round, load_cifar10, sample_batch, synth_dataset_with, train, ClientConfig, Dataset, SynthOptions,
    Update,
};
use gia_core::metrics::{evaluate_batch, gradient_cosine_matrix, mean_off_diagonal, psnr, MetricSet};
use gia_core::model::{build_model, preactivations, ModelSpec, Params};
use gia_core::{rng, Error, Result, Tensor};

use crate::config::{Artifact, Kind, Resolved, Source};

/// Offsets separating the seeds of a case's independent draws.
pub const TRAIN_SEED_OFFSET: u64 = 1000;
pub const AUX_SEED_OFFSET: u64 = 500;
pub const CALIBRATION_SEED_OFFSET: u64 = 77;

/// Images are dumped for at most this many samples per case.
pub const MAX_DUMPED: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseOutput {
    pub metrics: Option<MetricSet>,
    /// Kind-specific scalars, in a fixed order per kind.
    pub values: Vec<(&'static str, f64)>,
    /// `C×H×W` pixel-space images keyed by a file stem.
    pub images: Vec<(String, Tensor)>,
}

impl CaseOutput {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
    }
}

pub fn run_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    match r.kind {
        Kind::OpGia => op_gia_case(r, seed),
        Kind::Fedavg => fedavg_case(r, seed),
        Kind::GenW => gen_w_case(r, seed),
        Kind::GenZ => gen_z_case(r, seed),
        Kind::Lti => lti_case(r, seed),
        Kind::ClosedForm => closed_form_case(r, seed),
        Kind::Imprint => imprint_case(r, seed),
        Kind::Fishing => fishing_case(r, seed),
        Kind::Defense => defense_case(r, seed),
        Kind::MetricsAnalysis => metrics_case(r, seed),
    }
}

/// CIFAR samples for each role come from disjoint ranges of the batch file.
fn cifar_offset(seed_offset: u64) -> usize {
    match seed_offset {
        0 => 0,
        AUX_SEED_OFFSET => 4000,
        CALIBRATION_SEED_OFFSET => 6000,
        _ => 8000,
    }
}

fn dataset(r: &Resolved, n: usize, seed: u64, seed_offset: u64, family: u64) -> Result<Dataset> {
    match r.source {
        Source::Synth => {
            let opts = SynthOptions { family, ..Default::default() };
            synth_dataset_with(n, r.channels, r.resolution, r.resolution, r.classes, seed + seed_offset, &opts)
        }
        Source::Cifar10 => {
            let path = r.path.as_ref().ok_or_else(|| Error::Invalid("cifar10 source needs a path".into()))?;
            let start = cifar_offset(seed_offset);
            let idx: Vec<usize> = (start..start + n).collect();
            load_cifar10(path, Some(&idx))
        }
    }
}

fn input_shape(r: &Resolved) -> [usize; 3] {
    [r.channels, r.resolution, r.resolution]
}

/// Builds the target model; trained targets see a separate draw normalized like `data`.
pub fn target(r: &Resolved, data: &Dataset, seed: u64) -> Result<(ModelSpec, Params)> {
    let spec = r.arch.build(input_shape(r), r.classes, r.activation, r.hidden);
    let mut params = build_model(&spec, r.init, seed)?;
    if r.trained {
        let tr = dataset(r, r.train_size, seed, TRAIN_SEED_OFFSET, r.family)?.with_norm(data.norm.clone());
        params = train(&spec, &params, &tr, r.train_epochs, r.train_batch, r.train_lr, seed)?;
    }
    Ok((spec, params))
}

pub fn op_config(r: &Resolved, seed: u64) -> OpGiaConfig {
    OpGiaConfig {
        distance: r.distance,
        tv_weight: r.tv_weight,
        schedule: Schedule::new(r.iterations, r.lr),
        seed,
        ..OpGiaConfig::default()
    }
}

/// `d` samples share the label `seed mod classes`; the rest carry distinct labels.
pub fn duplicate_batch(data: &Dataset, b: usize, d: usize, seed: u64) -> Result<Vec<usize>> {
    let classes = data.classes;
    let base = (seed % classes as u64) as usize;
    let mut idx = Vec::with_capacity(b);
    for i in 0..b {
        let y = if i < d { base } else { (base + 1 + i) % classes };
        let pool = data.indices_of(y);
        if pool.is_empty() {
            return Err(Error::Invalid(format!("dataset has no samples of class {y}")));
        }
        idx.push(pool[i % pool.len()]);
    }
    Ok(idx)
}

fn batch_indices(r: &Resolved, data: &Dataset, seed: u64) -> Result<Vec<usize>> {
    match r.duplicates {
        Some(d) => duplicate_batch(data, r.batch_size, d, seed),
        None => sample_batch(data.len(), r.batch_size, seed, 0),
    }
}

fn image_pairs(truth: &Tensor, recon: &Tensor, order: &[usize]) -> Result<Vec<(String, Tensor)>> {
    let s = truth.shape();
    let chw = [s[1], s[2], s[3]];
    let mut out = Vec::new();
    for (i, &j) in order.iter().enumerate().take(MAX_DUMPED) {
        out.push((format!("truth{i}"), truth.slice_rows(i, 1)?.reshape(&chw)?));
        out.push((format!("recon{i}"), recon.slice_rows(j, 1)?.reshape(&chw)?));
    }
    Ok(out)
}

/// Scores an attack result against the model-space ground truth.
fn scored(res: &AttackResult, x: &Tensor, labels: &[usize], data: &Dataset) -> Result<CaseOutput> {
    let truth = data.norm.to_pixels(x);
    let recon = data.norm.to_pixels(&res.x_hat);
    let init = res.init.as_ref().map(|t| data.norm.to_pixels(t));
    let m = evaluate_batch(&truth, labels, &recon, &res.labels, init.as_ref())?;
    Ok(CaseOutput {
        metrics: Some(m.mean),
        values: vec![("objective", res.objective)],
        images: image_pairs(&truth, &recon, &m.order)?,
    })
}

fn op_gia_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let idx = batch_indices(r, &data, seed)?;
    let (x, y) = data.select(&idx)?;
    let x = data.norm.normalize(&x);
    let u = client_gradient(&spec, &params, &x, &y)?;
    let res = op_gia_attack(&u, &spec, &params, &op_config(r, seed), Some(&y), &data.norm)?;
    let mut out = scored(&res, &x, &y, &data)?;
    if y.len() >= 2 {
        let cm = gradient_cosine_matrix(&spec, &params, &x, &y)?;
        out.values.push(("cos_mean", mean_off_diagonal(&cm)));
    }
    Ok(out)
}

fn fedavg_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let all = dataset(r, r.data_size, seed, 0, r.family)?;
    let idx = sample_batch(all.len(), r.client_samples, seed, 0)?;
    let data = all.subset(&idx)?.with_norm(all.norm.clone());
    let (spec, params) = target(r, &all, seed)?;
    let ccfg = ClientConfig { batch_size: r.client_batch, epochs: r.client_epochs, lr: r.client_lr, seed };
    let (u, trace) = fedavg_round(&spec, &params, &data, &ccfg)?;
    let knowledge = match r.mode {
        FedAvgMode::Strong => ClientKnowledge::Trace { cfg: &ccfg, trace: &trace },
        FedAvgMode::Weak => {
            ClientKnowledge::Guess(ClientConfig { batch_size: r.guess_batch, epochs: r.guess_epochs, lr: r.guess_lr, seed: 0 })
        }
        FedAvgMode::None => ClientKnowledge::Nothing,
    };
    let res = fedavg_attack(&u, &spec, &params, &op_config(r, seed), r.mode, knowledge, &data.labels, &data.norm)?;
    scored(&res, &trace.truth.x, &data.labels, &data)
}

/// Fraction of pre-activation values inside `[−2, 2]`.
pub fn locality(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<f64> {
    let pre = preactivations(spec, params, x)?;
    let (mut inside, mut total) = (0usize, 0usize);
    for t in &pre {
        inside += t.data().iter().filter(|v| v.abs() <= 2.0).count();
        total += t.len();
    }
    Ok(if total == 0 { 1.0 } else { inside as f64 / total as f64 })
}

fn fedsgd(r: &Resolved, spec: &ModelSpec, params: &Params, data: &Dataset, seed: u64) -> Result<(Update, Tensor, Vec<usize>)> {
    let idx = sample_batch(data.len(), r.batch_size, seed, 0)?;
    let (x, y) = data.select(&idx)?;
    let x = data.norm.normalize(&x);
    Ok((client_gradient(spec, params, &x, &y)?, x, y))
}

fn gen_w_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let (u, x, y) = fedsgd(r, &spec, &params, &data, seed)?;
    let gen = GeneratorSpec::new(r.latent, input_shape(r), r.classes, true)?;
    let res = gen_w_attack(&u, &spec, &params, &gen, &y, &op_config(r, seed), &data.norm)?;
    let mut out = scored(&res, &x, &y, &data)?;
    out.values.push(("locality", locality(&spec, &params, &x)?));
    Ok(out)
}

/// Gaussian noise with the per-entry RMS of `u`.
pub fn noise_update(u: &Update, seed: u64) -> Result<Update> {
    let mut g = rng::stream(seed, 99);
    let scale = u.tensors.norm() / (u.tensors.numel() as f64).sqrt();
    let vals = u
        .tensors
        .tensors()
        .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| scale * rng::normal(&mut g)).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Update { tensors: u.tensors.with_tensors(vals)?, ..u.clone() })
}

fn gen_z_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let (u, x, y) = fedsgd(r, &spec, &params, &data, seed)?;
    let aux = dataset(r, r.aux_size, seed, AUX_SEED_OFFSET, r.aux_family)?;
    let gen = GeneratorSpec::new(r.latent, input_shape(r), r.classes, true)?;
    let dec = pretrain_decoder(&aux, &gen, r.decoder_epochs, seed)?;
    let u = if r.noise_gradient { noise_update(&u, seed)? } else { u };
    let res = latent_z_attack(&u, &spec, &params, &dec, &y, &op_config(r, seed), &data.norm)?;
    let mut out = scored(&res, &x, &y, &data)?;
    out.values.push(("decoder_heldout_mse", dec.heldout_mse));
    Ok(out)
}

/// Pixel-wise mean of a dataset's images, shaped `1×C×H×W`.
pub fn mean_image(d: &Dataset) -> Result<Tensor> {
    let n = d.len();
    let m: usize = d.image_shape().iter().product();
    let mut v = vec![0.0; m];
    for img in d.images.data().chunks(m) {
        for (a, b) in v.iter_mut().zip(img) {
            *a += b / n as f64;
        }
    }
    let [c, h, w] = d.image_shape();
    Tensor::new(vec![1, c, h, w], v)
}

fn lti_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let client = dataset(r, r.eval_samples, seed, 0, r.family)?;
    let norm = client.norm.clone();
    let aux = dataset(r, r.aux_size, seed, AUX_SEED_OFFSET, r.aux_family)?;
    let (spec, params) = target(r, &client, seed)?;
    let inv = InversionConfig {
        hidden: r.inversion_hidden.clone(),
        lr: r.inversion_lr,
        batch: r.inversion_batch,
        projection_seed: seed,
    };
    let b = r.batch_size;
    let model = train_inversion_model(&aux, &spec, &params, b, &inv, r.inversion_epochs, seed, &norm)?;
    let baseline = mean_image(&aux)?;
    let (mut sets, mut base_psnr, mut images) = (Vec::new(), 0.0, Vec::new());
    for start in (0..client.len()).step_by(b) {
        if start + b > client.len() {
            break;
        }
        let idx: Vec<usize> = (start..start + b).collect();
        let (x, y) = client.select(&idx)?;
        let u = client_gradient(&spec, &params, &norm.normalize(&x), &y)?;
        let res = invert_with_model(&model, &u)?;
        let recon = norm.to_pixels(&res.x_hat);
        let m = evaluate_batch(&x, &y, &recon, &y, None)?;
        for i in 0..b {
            base_psnr += psnr(&x.slice_rows(i, 1)?, &baseline)?;
        }
        if images.len() < 2 * MAX_DUMPED {
            images.extend(image_pairs(&x, &recon, &m.order)?.into_iter().map(|(k, t)| (format!("{k}_{start}"), t)));
        }
        sets.extend(m.per_image);
    }
    if sets.is_empty() {
        return Err(Error::Invalid(format!("{} client samples cannot form batches of {b}", client.len())));
    }
    let n = sets.len() as f64;
    Ok(CaseOutput {
        metrics: Some(MetricSet::mean(&sets)),
        values: vec![("baseline_psnr", base_psnr / n), ("final_train_loss", model.curve.last().copied().unwrap_or(f64::NAN))],
        images,
    })
}

/// Scores each truth image against its best-PSNR candidate.
fn best_match(truth: &Tensor, candidates: &[Tensor]) -> Result<(MetricSet, Vec<(String, Tensor)>)> {
    let s = truth.shape();
    let chw = [s[1], s[2], s[3]];
    let (mut sets, mut images) = (Vec::new(), Vec::new());
    for i in 0..s[0] {
        let t = truth.slice_rows(i, 1)?;
        let mut best: Option<(f64, &Tensor)> = None;
        for c in candidates {
            let p = psnr(&t, c)?;
            if best.is_none_or(|(bp, _)| p > bp) {
                best = Some((p, c));
            }
        }
        let (_, c) = best.ok_or_else(|| Error::Invalid("no candidate reconstructions".into()))?;
        sets.push(MetricSet::compute(&t, c, None)?);
        if i < MAX_DUMPED {
            images.push((format!("truth{i}"), t.reshape(&chw)?));
            images.push((format!("recon{i}"), c.reshape(&chw)?));
        }
    }
    Ok((MetricSet::mean(&sets), images))
}

fn closed_form_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let (u, x, _) = fedsgd(r, &spec, &params, &data, seed)?;
    let li = spec.first_param_layer().ok_or_else(|| Error::Invalid("model has no parameters".into()))?;
    let recs = closed_form_linear_invert(&u, &spec, &spec.layers[li].name)?;
    let [c, h, w] = spec.input;
    let mut max_err: f64 = 0.0;
    if x.shape()[0] == 1 {
        let x0 = x.reshape(&spec.input)?;
        for n in &recs {
            max_err = max_err.max(n.x.max_abs_diff(&x0));
        }
    }
    let candidates = recs
        .iter()
        .map(|n| n.x.reshape(&[1, c, h, w]).map(|t| data.norm.to_pixels(&t)))
        .collect::<Result<Vec<_>>>()?;
    let (m, images) = best_match(&data.norm.to_pixels(&x), &candidates)?;
    let mut values = vec![("neurons", recs.len() as f64)];
    if x.shape()[0] == 1 {
        values.push(("max_abs_error", max_err));
    }
    Ok(CaseOutput { metrics: Some(m), values, images })
}

fn imprint_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let cal = dataset(r, r.calibration_size, seed, CALIBRATION_SEED_OFFSET, r.family)?;
    let calx = data.norm.normalize(&cal.images);
    let (s2, p2, module) = build_imprint(&spec, &params, r.bins, &calx, seed)?;
    let (u, x, _) = fedsgd(r, &s2, &p2, &data, seed)?;
    let recs = imprint_reconstruct(&u, &module)?;
    let ok = exact_recoveries(&recs, &x, 1e-6).iter().filter(|&&v| v).count();
    let occ = singly_occupied(&module, &x);
    let [c, h, w] = spec.input;
    let candidates = recs
        .iter()
        .map(|b| b.x.reshape(&[1, c, h, w]).map(|t| data.norm.to_pixels(&t)))
        .collect::<Result<Vec<_>>>()?;
    let (metrics, images) = if candidates.is_empty() {
        (None, Vec::new())
    } else {
        let (m, i) = best_match(&data.norm.to_pixels(&x), &candidates)?;
        (Some(m), i)
    };
    Ok(CaseOutput {
        metrics,
        values: vec![
            ("recovered", ok as f64),
            ("singly_occupied", occ as f64),
            ("rate", ok as f64 / r.batch_size as f64),
        ],
        images,
    })
}

/// One sample of `target` first, then one sample from each other class in turn.
pub fn fishing_batch(data: &Dataset, target: usize, b: usize) -> Result<Vec<usize>> {
    let first = data.indices_of(target);
    let mut idx = vec![*first.first().ok_or_else(|| Error::Invalid(format!("no samples of class {target}")))?];
    for c in (0..data.classes).filter(|&c| c != target) {
        if idx.len() == b {
            break;
        }
        let pool = data.indices_of(c);
        let i = *pool.get(1).or(pool.first()).ok_or_else(|| Error::Invalid(format!("no samples of class {c}")))?;
        idx.push(i);
    }
    if idx.len() < b {
        return Err(Error::Invalid(format!("cannot form a fishing batch of {b}")));
    }
    Ok(idx)
}

fn fishing_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let tc = r.target.unwrap_or((seed % r.classes as u64) as usize);
    let idx = fishing_batch(&data, tc, r.batch_size)?;
    let (x, y) = data.select(&idx)?;
    let x = data.norm.normalize(&x);
    let x0 = x.slice_rows(0, 1)?;
    let (plan, man) = fishing_manipulate(&spec, &params, tc, r.beta)?;
    let ub = client_gradient(&spec, &man, &x, &y)?;
    let iso = isolation_score(&ub, &client_gradient(&spec, &man, &x0, &y[..1])?)?;
    let ub0 = client_gradient(&spec, &params, &x, &y)?;
    let iso0 = isolation_score(&ub0, &client_gradient(&spec, &params, &x0, &y[..1])?)?;
    let cfg = op_config(r, seed);
    let rf = fishing_then_invert(&ub, &spec, &man, &plan, &cfg, &data.norm)?;
    let tp = data.norm.to_pixels(&x0);
    let fp = data.norm.to_pixels(&rf.x_hat);
    let init = rf.init.as_ref().map(|t| data.norm.to_pixels(t));
    let m = MetricSet::compute(&tp, &fp, init.as_ref())?;
    let plain = op_gia_attack(&ub0, &spec, &params, &cfg, Some(&y), &data.norm)?;
    let pm = evaluate_batch(&data.norm.to_pixels(&x), &y, &data.norm.to_pixels(&plain.x_hat), &plain.labels, None)?;
    let best = pm.per_image.iter().map(|s| s.psnr).fold(f64::NEG_INFINITY, f64::max);
    let chw = [r.channels, r.resolution, r.resolution];
    Ok(CaseOutput {
        metrics: Some(m),
        values: vec![
            ("isolation", iso),
            ("isolation_plain", iso0),
            ("plain_best_psnr", best),
            ("plain_target_psnr", pm.per_image[0].psnr),
        ],
        images: vec![("truth0".into(), tp.reshape(&chw)?), ("recon0".into(), fp.reshape(&chw)?)],
    })
}

fn defense_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let reference = ReferenceSpec::from_spec(&spec, &[r.activation]);
    let (rs, rp) = match r.artifact {
        Artifact::Clean => (spec, params),
        Artifact::Imprint => {
            let cal = dataset(r, r.calibration_size, seed, CALIBRATION_SEED_OFFSET, r.family)?;
            let (s2, p2, _) = build_imprint(&spec, &params, r.bins, &data.norm.normalize(&cal.images), seed)?;
            (s2, p2)
        }
        Artifact::Fishing => {
            let tc = r.target.unwrap_or((seed % r.classes as u64) as usize);
            let (_, man) = fishing_manipulate(&spec, &params, tc, r.beta)?;
            (spec, man)
        }
    };
    let ccfg = ClientConfig { batch_size: r.client_batch, epochs: r.client_epochs, lr: r.client_lr, seed };
    let report = validate(&rs, &rp, &reference, Some(&ccfg), &ScanThresholds::default());
    let diffs = match &report.architecture {
        gia_core::defense::ArchVerdict::Pass => 0,
        gia_core::defense::ArchVerdict::Mismatch(d) => d.len(),
    };
    Ok(CaseOutput {
        metrics: None,
        values: vec![
            ("passed", report.passed() as u8 as f64),
            ("architecture_diffs", diffs as f64),
            ("parameter_flags", report.flags.len() as f64),
            ("lint_findings", report.lint.len() as f64),
        ],
        images: Vec::new(),
    })
}

fn metrics_case(r: &Resolved, seed: u64) -> Result<CaseOutput> {
    let data = dataset(r, r.data_size, seed, 0, r.family)?;
    let (spec, params) = target(r, &data, seed)?;
    let idx = batch_indices(r, &data, seed)?;
    let (x, y) = data.select(&idx)?;
    let cm = gradient_cosine_matrix(&spec, &params, &data.norm.normalize(&x), &y)?;
    let n = y.len();
    let off: Vec<f64> = (0..n * n).filter(|k| k / n != k % n).map(|k| cm.data()[k]).collect();
    Ok(CaseOutput {
        metrics: None,
        values: vec![
            ("cos_mean", mean_off_diagonal(&cm)),
            ("cos_min", off.iter().copied().fold(f64::INFINITY, f64::min)),
            ("cos_max", off.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ],
        images: Vec::new(),
    })
}
