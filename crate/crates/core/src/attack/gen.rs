//! Generator-mediated attacks and learned inversion models.
//!
//! The generator maps `[z, embed(y)]` through a linear layer, a reshape to
//! `16 × h/4 × w/4` and two stride-2 transposed convolutions to a sigmoid
//! image. [`pretrain_decoder`] fits it as the decoder of an autoencoder.

use rand::seq::SliceRandom;

use super::opt::OpGiaConfig;
use super::{distance_node, minimize, AttackResult, Schedule};
use crate::autodiff::{AdamState, Graph, NodeId};
use crate::error::{Error, Result};
use crate::fl::{client_gradient, Dataset, Normalization, Update, UpdateKind};
use crate::model::{constant_params, ModelSpec, Params, TensorMap};
use crate::rng;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 8;
const GEN_CHANNELS: usize = 16;
const MID_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub latent: usize,
    pub output: [usize; 3],
    pub classes: usize,
    /// Concatenate a learned label embedding to the latent vector.
    pub conditional: bool,
}

impl GeneratorSpec {
    pub fn new(latent: usize, output: [usize; 3], classes: usize, conditional: bool) -> Result<Self> {
        let s = Self { latent, output, classes, conditional };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.output;
        if self.latent == 0 || c == 0 || h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Spec(format!(
                "generator needs latent ≥ 1 and output sides divisible by 4, got latent {} output {:?}",
                self.latent, self.output
            )));
        }
        if self.conditional && self.classes == 0 {
            return Err(Error::Spec("conditional generator needs classes".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.latent + if self.conditional { EMBED_DIM } else { 0 }
    }

    fn seed_hw(&self) -> (usize, usize) {
        (self.output[1] / 4, self.output[2] / 4)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h4, w4) = self.seed_hw();
        let hidden = GEN_CHANNELS * h4 * w4;
        let mut v = Vec::new();
        if self.conditional {
            v.push(("embed.weight".to_string(), vec![self.classes, EMBED_DIM]));
        }
        v.push(("fc.weight".into(), vec![hidden, self.input_dim()]));
        v.push(("fc.bias".into(), vec![hidden]));
        v.push(("up1.weight".into(), vec![GEN_CHANNELS, MID_CHANNELS, 4, 4]));
        v.push(("up1.bias".into(), vec![MID_CHANNELS]));
        v.push(("up2.weight".into(), vec![MID_CHANNELS, self.output[0], 4, 4]));
        v.push(("up2.bias".into(), vec![self.output[0]]));
        v
    }

    /// Uniform fan-in initialization; embeddings are standard normal.
    pub fn init(&self, seed: u64) -> TensorMap {
        let mut r = rng::stream(seed, 21);
        let mut m = TensorMap::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "embed.weight" {
                Tensor::from_parts(shape, rng::normals(&mut r, n))
            } else {
                let fan_in: usize = if name.starts_with("up") { shape[0] * 4 } else { shape[1] };
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_parts(shape, (0..n).map(|_| b * (2.0 * rand::Rng::random::<f64>(&mut r) - 1.0)).collect())
            };
            m.insert(name, t);
        }
        m
    }

    pub fn to_records(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let [c, h, w] = self.output;
        m.insert(
            "__generator__",
            Tensor::from_vec(vec![
                self.latent as f64,
                c as f64,
                h as f64,
                w as f64,
                self.classes as f64,
                f64::from(u8::from(self.conditional)),
            ]),
        );
        m
    }

    pub fn from_records(m: &TensorMap) -> Result<Self> {
        let d = m.require("__generator__")?.data();
        if d.len() != 6 {
            return Err(Error::Format("generator record must hold 6 values".into()));
        }
        Self::new(d[0] as usize, [d[1] as usize, d[2] as usize, d[3] as usize], d[4] as usize, d[5] == 1.0)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

/// Records the generator; returns the pixel-space image batch node.
pub fn generator_forward(
    g: &mut Graph,
    spec: &GeneratorSpec,
    params: &[NodeId],
    z: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let n = labels.len();
    if g.shape(z) != [n, spec.latent] {
        return Err(Error::Shape(format!("latent batch {:?} should be [{n}, {}]", g.shape(z), spec.latent)));
    }
    if params.len() != spec.param_shapes().len() {
        return Err(Error::Shape("generator parameter count mismatch".into()));
    }
    let mut p = params.iter().copied();
    let input = if spec.conditional {
        if let Some(&bad) = labels.iter().find(|&&y| y >= spec.classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for the generator")));
        }
        let emb = p.next().expect("embedding");
        let oh = g.constant(one_hot(labels, spec.classes));
        let e = g.matmul(oh, emb)?;
        g.concat_cols(z, e)?
    } else {
        z
    };
    let (fw, fb, u1w, u1b, u2w, u2b) = (
        p.next().expect("fc.weight"),
        p.next().expect("fc.bias"),
        p.next().expect("up1.weight"),
        p.next().expect("up1.bias"),
        p.next().expect("up2.weight"),
        p.next().expect("up2.bias"),
    );
    let (h4, w4) = spec.seed_hw();
    let fwt = g.transpose(fw)?;
    let hdn = g.matmul(input, fwt)?;
    let hdn = g.add_bias(hdn, fb)?;
    let hdn = g.relu(hdn)?;
    let hdn = g.reshape(hdn, &[n, GEN_CHANNELS, h4, w4])?;
    let u1 = g.conv_transpose(hdn, u1w, 2, 1, (2 * h4, 2 * w4))?;
    let u1 = g.add_bias(u1, u1b)?;
    let u1 = g.relu(u1)?;
    let u2 = g.conv_transpose(u1, u2w, 2, 1, (4 * h4, 4 * w4))?;
    let u2 = g.add_bias(u2, u2b)?;
    g.sigmoid(u2)
}

/// Per-channel normalization of a pixel batch node.
pub fn normalize_node(g: &mut Graph, x: NodeId, norm: &Normalization) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    let n: usize = s.iter().product();
    let scale = Tensor::new(s.clone(), (0..n).map(|i| 1.0 / norm.std[(i / hw) % c]).collect())?;
    let shift = Tensor::from_vec((0..c).map(|ch| -norm.mean[ch] / norm.std[ch]).collect());
    let sc = g.constant(scale);
    let sh = g.constant(shift);
    let y = g.mul(x, sc)?;
    g.add_bias(y, sh)
}

/// Runs a trained generator outside a graph, returning pixels.
pub fn generate(spec: &GeneratorSpec, params: &TensorMap, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let pn = constant_params(&mut g, params);
    let zn = g.constant(z.clone());
    let out = generator_forward(&mut g, spec, &pn, zn, labels)?;
    Ok(g.value(out).clone())
}

/// A trained autoencoder: the decoder is the generator.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: GeneratorSpec,
    pub params: TensorMap,
    pub encoder: TensorMap,
    pub train_curve: Vec<f64>,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

const ENCODER_HIDDEN: usize = 64;
pub const DECODER_MSE_LIMIT: f64 = 0.02;

fn encoder_shapes(m: usize, latent: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("enc1.weight".into(), vec![ENCODER_HIDDEN, m]),
        ("enc1.bias".into(), vec![ENCODER_HIDDEN]),
        ("enc2.weight".into(), vec![latent, ENCODER_HIDDEN]),
        ("enc2.bias".into(), vec![latent]),
    ]
}

fn encoder_forward(g: &mut Graph, p: &[NodeId], x: NodeId, n: usize, m: usize) -> Result<NodeId> {
    let flat = g.reshape(x, &[n, m])?;
    let w1 = g.transpose(p[0])?;
    let h = g.matmul(flat, w1)?;
    let h = g.add_bias(h, p[1])?;
    let h = g.relu(h)?;
    let w2 = g.transpose(p[2])?;
    let z = g.matmul(h, w2)?;
    g.add_bias(z, p[3])
}

fn autoencoder_loss(
    g: &mut Graph,
    spec: &GeneratorSpec,
    enc: &[NodeId],
    dec: &[NodeId],
    x: &Tensor,
    labels: &[usize],
) -> Result<NodeId> {
    let n = labels.len();
    let m: usize = spec.output.iter().product();
    let xn = g.constant(x.clone());
    let z = encoder_forward(g, enc, xn, n, m)?;
    let out = generator_forward(g, spec, dec, z, labels)?;
    g.mse(out, xn)
}

fn autoencoder_mse(spec: &GeneratorSpec, enc: &TensorMap, dec: &TensorMap, data: &Dataset) -> Result<f64> {
    let mut g = Graph::new();
    let e = constant_params(&mut g, enc);
    let d = constant_params(&mut g, dec);
    let l = autoencoder_loss(&mut g, spec, &e, &d, &data.images, &data.labels)?;
    Ok(g.value(l).item())
}

/// Trains an autoencoder on pixel-space `aux` images and keeps its decoder.
///
/// One sample in eight is held out. Fails when the held-out MSE stays above
/// [`DECODER_MSE_LIMIT`].
pub fn pretrain_decoder(aux: &Dataset, spec: &GeneratorSpec, epochs: usize, seed: u64) -> Result<Decoder> {
    spec.validate()?;
    if aux.image_shape() != spec.output {
        return Err(Error::Shape(format!(
            "aux images {:?} do not match generator output {:?}",
            aux.image_shape(),
            spec.output
        )));
    }
    let m: usize = spec.output.iter().product();
    let (train_idx, held_idx): (Vec<usize>, Vec<usize>) = if aux.len() >= 8 {
        (0..aux.len()).partition(|i| i % 8 != 7)
    } else {
        ((0..aux.len()).collect(), (0..aux.len()).collect())
    };
    let train = aux.subset(&train_idx)?;
    let held = aux.subset(&held_idx)?;

    let dec0 = spec.init(seed);
    let mut r = rng::stream(seed, 22);
    let mut enc0 = TensorMap::new();
    for (name, shape) in encoder_shapes(m, spec.latent) {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let b = 1.0 / (shape[1] as f64).sqrt();
            Tensor::from_parts(shape, (0..n).map(|_| b * (2.0 * rand::Rng::random::<f64>(&mut r) - 1.0)).collect())
        };
        enc0.insert(name, t);
    }
    let ne = enc0.len();
    let mut vars: Vec<Tensor> = enc0.to_vec();
    vars.extend(dec0.to_vec());
    let mut adam = AdamState::for_params(&vars);
    let batch = 32.min(train.len());
    let mut curve = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr_at = |e: usize| if e < epochs * 3 / 4 { 0.01 } else { 0.002 };
    for epoch in 0..epochs {
        order.shuffle(&mut r);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let (xb, yb) = train.select(chunk)?;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vars.iter().map(|v| g.variable(v.clone())).collect();
            let loss = autoencoder_loss(&mut g, spec, &ids[..ne], &ids[ne..], &xb, &yb)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NotConverged { message: format!("loss became {lv} in epoch {epoch}"), curve });
            }
            total += lv * chunk.len() as f64;
            count += chunk.len();
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = ids.iter().map(|&i| grads.take(i)).collect();
            adam.step(&mut vars, &gs, lr_at(epoch))?;
        }
        curve.push(total / count as f64);
    }
    let encoder = enc0.with_tensors(vars[..ne].to_vec())?;
    let params = dec0.with_tensors(vars[ne..].to_vec())?;
    let train_mse = autoencoder_mse(spec, &encoder, &params, &train)?;
    let heldout_mse = autoencoder_mse(spec, &encoder, &params, &held)?;
    if !(heldout_mse < DECODER_MSE_LIMIT) {
        return Err(Error::NotConverged {
            message: format!("held-out reconstruction MSE {heldout_mse:.4} exceeds {DECODER_MSE_LIMIT}"),
            curve,
        });
    }
    Ok(Decoder { spec: spec.clone(), params, encoder, train_curve: curve, train_mse, heldout_mse })
}

fn check_fedsgd(update: &Update, spec: &ModelSpec, params: &Params, labels: &[usize]) -> Result<()> {
    if update.kind != UpdateKind::FedSgdGradient {
        return Err(Error::Invalid("generator attacks need a FedSGD gradient".into()));
    }
    if !update.tensors.same_layout(params) || spec.param_shapes().len() != params.len() {
        return Err(Error::Shape("update tensors do not match the model parameters".into()));
    }
    if labels.len() != update.batch_size {
        return Err(Error::Invalid(format!("{} labels for a batch of {}", labels.len(), update.batch_size)));
    }
    Ok(())
}

fn generated_objective(
    g: &mut Graph,
    gen: &GeneratorSpec,
    gen_params: &[NodeId],
    z: NodeId,
    spec: &ModelSpec,
    params: &Params,
    labels: &[usize],
    target: &[Tensor],
    cfg: &OpGiaConfig,
    norm: &Normalization,
) -> Result<NodeId> {
    let px = generator_forward(g, gen, gen_params, z, labels)?;
    let x = normalize_node(g, px, norm)?;
    let pn = constant_params(g, params);
    let fwd = spec.forward(g, &pn, x)?;
    let grads = spec.param_grads_in_graph(g, &fwd, labels)?;
    let d = distance_node(g, cfg.distance, &grads, target)?;
    if cfg.tv_weight == 0.0 {
        return Ok(d);
    }
    let tv = g.total_variation(x)?;
    let tv = g.scale(tv, cfg.tv_weight)?;
    g.add(d, tv)
}

fn latent_init(n: usize, latent: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 23);
    Tensor::from_parts(vec![n, latent], rng::normals(&mut r, n * latent))
}

/// Optimizes only the latent input of a pretrained decoder.
pub fn latent_z_attack(
    update: &Update,
    spec: &ModelSpec,
    params: &Params,
    decoder: &Decoder,
    labels: &[usize],
    cfg: &OpGiaConfig,
    norm: &Normalization,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_fedsgd(update, spec, params, labels)?;
    let gen = &decoder.spec;
    let target = update.tensors.to_vec();
    let z0 = latent_init(labels.len(), gen.latent, cfg.seed);
    let res = minimize(
        vec![z0.clone()],
        &cfg.schedule,
        |g, ids| {
            let gp = constant_params(g, &decoder.params);
            generated_objective(g, gen, &gp, ids[0], spec, params, labels, &target, cfg, norm)
        },
        |_| {},
    )?;
    let z = res.best.into_iter().next().expect("one variable");
    let x_hat = norm.normalize(&generate(gen, &decoder.params, &z, labels)?);
    let init = norm.normalize(&generate(gen, &decoder.params, &z0, labels)?);
    Ok(AttackResult {
        x_hat,
        labels: labels.to_vec(),
        objective: res.best_objective,
        trajectory: res.trajectory,
        init: Some(init),
        metrics: None,
        seed: cfg.seed,
        config: format!("latent-z latent={} {}", gen.latent, cfg.echo()),
        semantic_only: true,
    })
}

/// Optimizes the weights of a freshly initialized generator at a fixed latent input.
pub fn gen_w_attack(
    update: &Update,
    spec: &ModelSpec,
    params: &Params,
    gen: &GeneratorSpec,
    labels: &[usize],
    cfg: &OpGiaConfig,
    norm: &Normalization,
) -> Result<AttackResult> {
    cfg.validate()?;
    gen.validate()?;
    check_fedsgd(update, spec, params, labels)?;
    if gen.output != spec.input {
        return Err(Error::Shape(format!("generator output {:?} differs from model input {:?}", gen.output, spec.input)));
    }
    let target = update.tensors.to_vec();
    let z = latent_init(labels.len(), gen.latent, cfg.seed);
    let w0 = gen.init(cfg.seed);
    let res = minimize(
        w0.to_vec(),
        &cfg.schedule,
        |g, ids| {
            let zn = g.constant(z.clone());
            generated_objective(g, gen, ids, zn, spec, params, labels, &target, cfg, norm)
        },
        |_| {},
    )?;
    let w = w0.with_tensors(res.best)?;
    let x_hat = norm.normalize(&generate(gen, &w, &z, labels)?);
    let init = norm.normalize(&generate(gen, &w0, &z, labels)?);
    Ok(AttackResult {
        x_hat,
        labels: labels.to_vec(),
        objective: res.best_objective,
        trajectory: res.trajectory,
        init: Some(init),
        metrics: None,
        seed: cfg.seed,
        config: format!("gen-w latent={} {}", gen.latent, cfg.echo()),
        semantic_only: false,
    })
}

/// Dimension of the projected gradient fed to inversion models.
pub const PROJECTION_DIM: usize = 2048;

#[derive(Clone, Debug)]
pub struct InversionConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub projection_seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { hidden: vec![256], lr: 1e-3, batch: 32, projection_seed: 0 }
    }
}

/// MLP mapping a (projected, standardized) gradient to a pixel batch.
#[derive(Clone, Debug)]
pub struct InversionModel {
    pub grad_dim: usize,
    pub input_dim: usize,
    pub batch: usize,
    pub image: [usize; 3],
    pub projection_seed: u64,
    projection: Option<Tensor>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    pub params: TensorMap,
    pub curve: Vec<f64>,
    pub norm: Normalization,
}

fn projection_matrix(dim: usize, grad_dim: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 31);
    let s = 1.0 / (dim as f64).sqrt();
    Tensor::from_parts(vec![grad_dim, dim], rng::normals(&mut r, dim * grad_dim).into_iter().map(|v| v * s).collect())
}

fn mlp_forward(g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    let layers = p.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let wt = g.transpose(p[2 * l])?;
        h = g.matmul(h, wt)?;
        h = g.add_bias(h, p[2 * l + 1])?;
        h = if l + 1 < layers { g.relu(h)? } else { g.sigmoid(h)? };
    }
    Ok(h)
}

impl InversionModel {
    fn project(&self, flat: &[f64]) -> Vec<f64> {
        // Unit-norm first: the loss scale of the target says little about the input.
        let n = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = if n > 0.0 { flat.iter().map(|v| v / n).collect() } else { flat.to_vec() };
        let flat = &unit[..];
        let raw = match &self.projection {
            Some(p) => {
                let d = self.input_dim;
                let mut out = vec![0.0; d];
                for (i, &gv) in flat.iter().enumerate() {
                    if gv != 0.0 {
                        for (o, &pv) in out.iter_mut().zip(&p.data()[i * d..(i + 1) * d]) {
                            *o += gv * pv;
                        }
                    }
                }
                out
            }
            None => flat.to_vec(),
        };
        raw.iter().zip(self.feature_mean.iter().zip(&self.feature_std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    fn features(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.input_dim;
        let data: Vec<f64> = rows.iter().flat_map(|r| self.project(r)).collect();
        Tensor::new(vec![rows.len(), d], data)
    }

    fn predict(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = constant_params(&mut g, &self.params);
        let x = g.constant(feats.clone());
        let out = mlp_forward(&mut g, &p, x)?;
        Ok(g.value(out).clone())
    }
}

/// Trains an inversion model on gradients of `aux` batches computed against the target.
pub fn train_inversion_model(
    aux: &Dataset,
    spec: &ModelSpec,
    params: &Params,
    batch: usize,
    inv: &InversionConfig,
    epochs: usize,
    seed: u64,
    norm: &Normalization,
) -> Result<InversionModel> {
    if batch == 0 || aux.len() < batch {
        return Err(Error::Invalid(format!("aux set of {} cannot form batches of {batch}", aux.len())));
    }
    if aux.image_shape() != spec.input {
        return Err(Error::Shape("aux images do not match the model input".into()));
    }
    let m = spec.input_len();
    let groups: Vec<Vec<usize>> = (0..aux.len() / batch).map(|i| (i * batch..(i + 1) * batch).collect()).collect();
    let mut grads = Vec::with_capacity(groups.len());
    let mut targets = Vec::with_capacity(groups.len() * batch * m);
    for idx in &groups {
        let (x, y) = aux.select(idx)?;
        let u = client_gradient(spec, params, &norm.normalize(&x), &y)?;
        grads.push(u.tensors.flatten());
        targets.extend_from_slice(x.data());
    }
    let grad_dim = grads[0].len();
    let (input_dim, projection) = if grad_dim > PROJECTION_DIM {
        (PROJECTION_DIM, Some(projection_matrix(PROJECTION_DIM, grad_dim, inv.projection_seed)))
    } else {
        (grad_dim, None)
    };
    let mut model = InversionModel {
        grad_dim,
        input_dim,
        batch,
        image: spec.input,
        projection_seed: inv.projection_seed,
        projection,
        feature_mean: vec![0.0; input_dim],
        feature_std: vec![1.0; input_dim],
        params: TensorMap::new(),
        curve: Vec::new(),
        norm: norm.clone(),
    };
    let raw = model.features(&grads)?;
    let nrow = grads.len();
    for j in 0..input_dim {
        let col: Vec<f64> = (0..nrow).map(|i| raw.data()[i * input_dim + j]).collect();
        let mean = col.iter().sum::<f64>() / nrow as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nrow as f64;
        model.feature_mean[j] = mean;
        model.feature_std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let feats = model.features(&grads)?;
    let out_dim = batch * m;
    let targets = Tensor::new(vec![nrow, out_dim], targets)?;

    let mut r = rng::stream(seed, 32);
    let mut dims = vec![input_dim];
    dims.extend(&inv.hidden);
    dims.push(out_dim);
    let mut init = TensorMap::new();
    for (l, w) in dims.windows(2).enumerate() {
        let b = 1.0 / (w[0] as f64).sqrt();
        let n = w[0] * w[1];
        init.insert(
            format!("inv{l}.weight"),
            Tensor::from_parts(vec![w[1], w[0]], (0..n).map(|_| b * (2.0 * rand::Rng::random::<f64>(&mut r) - 1.0)).collect()),
        );
        init.insert(format!("inv{l}.bias"), Tensor::zeros(&[w[1]]));
    }
    let mut vars = init.to_vec();
    let mut adam = AdamState::for_params(&vars);
    let mut order: Vec<usize> = (0..nrow).collect();
    let mb = inv.batch.clamp(1, nrow);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(mb) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vars.iter().map(|v| g.variable(v.clone())).collect();
            let x = g.constant(feats.select_rows(chunk)?);
            let t = g.constant(targets.select_rows(chunk)?);
            let out = mlp_forward(&mut g, &ids, x)?;
            let loss = g.mse(out, t)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NotConverged { message: format!("loss became {lv} in epoch {epoch}"), curve });
            }
            total += lv * chunk.len() as f64;
            let mut gr = g.backward(loss)?;
            let gs: Vec<Tensor> = ids.iter().map(|&i| gr.take(i)).collect();
            adam.step(&mut vars, &gs, inv.lr)?;
        }
        curve.push(total / nrow as f64);
    }
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        if last > first {
            return Err(Error::NotConverged { message: "inversion training loss increased".into(), curve });
        }
    }
    model.params = init.with_tensors(vars)?;
    model.curve = curve;
    Ok(model)
}

/// One forward pass of the inversion model.
pub fn invert_with_model(inv: &InversionModel, update: &Update) -> Result<AttackResult> {
    let flat = update.tensors.flatten();
    if flat.len() != inv.grad_dim {
        return Err(Error::Shape(format!(
            "update has {} gradient entries, the inversion model was trained on {}",
            flat.len(),
            inv.grad_dim
        )));
    }
    if update.batch_size != inv.batch {
        return Err(Error::Shape(format!(
            "update batch {} differs from the trained batch {}",
            update.batch_size, inv.batch
        )));
    }
    let feats = inv.features(&[flat])?;
    let out = inv.predict(&feats)?;
    let mut shape = vec![inv.batch];
    shape.extend_from_slice(&inv.image);
    let px = Tensor::new(shape, out.into_data())?;
    Ok(AttackResult {
        x_hat: inv.norm.normalize(&px),
        labels: Vec::new(),
        objective: f64::NAN,
        trajectory: Vec::new(),
        init: None,
        metrics: None,
        seed: inv.projection_seed,
        config: format!("inversion-model dim={} batch={}", inv.input_dim, inv.batch),
        semantic_only: false,
    })
}

/// Default optimization settings for the generator attacks.
pub fn default_gen_config(iterations: usize, seed: u64) -> OpGiaConfig {
    OpGiaConfig { schedule: Schedule::new(iterations, 0.01), seed, tv_weight: 1e-3, ..OpGiaConfig::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_output_shape_and_range() {
        let spec = GeneratorSpec::new(4, [1, 8, 8], 3, true).unwrap();
        let p = spec.init(1);
        let z = Tensor::full(&[2, 4], 0.3);
        let out = generate(&spec, &p, &z, &[0, 2]).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(GeneratorSpec::new(4, [1, 6, 6], 3, true).is_err());
    }

    #[test]
    fn generator_records_round_trip() {
        let spec = GeneratorSpec::new(6, [3, 8, 8], 10, false).unwrap();
        assert_eq!(GeneratorSpec::from_records(&spec.to_records()).unwrap(), spec);
    }
}
