//! Central finite-difference checks of the tape against itself.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{forward, Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckReport {
    fn merge(self, o: CheckReport) -> CheckReport {
        CheckReport {
            max_rel_error: self.max_rel_error.max(o.max_rel_error),
            coordinates: self.coordinates + o.coordinates,
        }
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function with central differences.
///
/// `coords` limits how many coordinates per input are probed; `None` probes all.
pub fn check_function<F>(inputs: &[Tensor], f: F, h: f64, coords: Option<(usize, &mut ChaCha8Rng)>) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Shape("gradient check needs a scalar function".into()));
    }
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut rng = coords;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]);
        let picks: Vec<usize> = match rng.as_mut() {
            Some((n, r)) if *n < x.len() => (0..*n).map(|_| r.random_range(0..x.len())).collect(),
            _ => (0..x.len()).collect(),
        };
        for j in picks {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = x.data()[j] - h;
            let fm = eval(&xs)?;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
            count += 1;
        }
    }
    Ok(CheckReport { max_rel_error: worst, coordinates: count })
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect())
}

/// Away from zero, with random sign.
fn signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(r, shape, lo, hi);
    t.data_mut().iter_mut().for_each(|v| {
        if r.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// One representative instance of every primitive: the op, a sampler for its inputs.
pub fn primitive_cases() -> Vec<(&'static str, OpKind, fn(&mut ChaCha8Rng) -> Vec<Tensor>)> {
    use OpKind::*;
    fn ab(r: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)]
    }
    fn a(r: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![uniform(r, &[3, 4], -2.0, 2.0)]
    }
    fn img(r: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![uniform(r, &[2, 2, 4, 5], -2.0, 2.0)]
    }
    vec![
        ("matmul", MatMul, |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4, 2], -2.0, 2.0)]),
        ("transpose", Transpose, a),
        ("conv2d", Conv2d { stride: 2, pad: 1 }, |r| {
            vec![uniform(r, &[2, 2, 5, 5], -2.0, 2.0), uniform(r, &[3, 2, 3, 3], -2.0, 2.0)]
        }),
        ("conv_transpose", ConvTranspose { stride: 2, pad: 1, out_hw: (5, 5) }, |r| {
            vec![uniform(r, &[2, 3, 3, 3], -2.0, 2.0), uniform(r, &[3, 2, 3, 3], -2.0, 2.0)]
        }),
        ("conv_weight_grad", ConvWeightGrad { stride: 2, pad: 1, kernel_hw: (3, 3) }, |r| {
            vec![uniform(r, &[2, 2, 5, 5], -2.0, 2.0), uniform(r, &[2, 3, 3, 3], -2.0, 2.0)]
        }),
        ("add", Add, ab),
        ("sub", Sub, ab),
        ("mul", Mul, ab),
        ("div", Div, |r| vec![uniform(r, &[3, 4], -2.0, 2.0), signed(r, &[3, 4], 0.5, 2.0)]),
        ("affine", Affine { alpha: -1.5, beta: 0.25 }, a),
        ("add_bias", AddBias, |r| vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)]),
        ("relu", Relu, |r| vec![signed(r, &[3, 4], 0.01, 2.0)]),
        ("step", Step, |r| vec![signed(r, &[3, 4], 0.01, 2.0)]),
        ("sigmoid", Sigmoid, a),
        ("tanh", Tanh, a),
        ("leaky_relu", LeakyRelu { alpha: 0.01 }, |r| vec![signed(r, &[3, 4], 0.01, 2.0)]),
        ("leaky_step", LeakyStep { alpha: 0.01 }, |r| vec![signed(r, &[3, 4], 0.01, 2.0)]),
        ("sqrt", Sqrt, |r| vec![uniform(r, &[3, 4], 0.1, 2.0)]),
        ("softmax", Softmax, a),
        ("softmax_cross_entropy", SoftmaxCrossEntropy { labels: vec![0, 3, 1] }, a),
        ("mse", Mse, ab),
        ("total_variation", TotalVariation, img),
        ("reshape", Reshape { shape: vec![4, 3] }, a),
        ("slice", Slice { start: 1, len: 2 }, a),
        ("concat_cols", ConcatCols, |r| vec![uniform(r, &[3, 2], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)]),
        ("sum", Sum, a),
        ("mean", Mean, a),
        ("sum_to_bias", SumToBias, img),
    ]
}

/// Checks one primitive, contracting non-scalar outputs with fixed random weights.
pub fn check_primitive(kind: &OpKind, inputs: &[Tensor], weights_seed: u64, h: f64) -> Result<CheckReport> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out_shape = forward(kind, &refs)?.shape().to_vec();
    let mut r = crate::rng::stream(weights_seed, 41);
    let w = uniform(&mut r, &out_shape, -1.0, 1.0);
    check_function(
        inputs,
        |g, ids| {
            let y = g.apply(kind.clone(), ids)?;
            if g.value(y).is_scalar() {
                return Ok(y);
            }
            let wn = g.constant(w.clone());
            g.dot(y, wn)
        },
        h,
        None,
    )
}

/// Runs every primitive on `trials` random inputs.
pub fn check_all_primitives(trials: usize, seed: u64, h: f64) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut out = Vec::new();
    for (name, kind, sample) in primitive_cases() {
        let mut r = crate::rng::stream(seed, 40);
        let mut rep = CheckReport { max_rel_error: 0.0, coordinates: 0 };
        for t in 0..trials {
            let inputs = sample(&mut r);
            rep = rep.merge(check_primitive(&kind, &inputs, seed ^ t as u64, h)?);
        }
        out.push((name, rep));
    }
    Ok(out)
}

/// Checks a model in two ways: the cross-entropy loss against input and
/// parameters, and a random contraction of the in-graph parameter gradients
/// against the input, which is the path gradient matching differentiates.
pub fn check_model(
    spec: &crate::model::ModelSpec,
    params: &crate::model::Params,
    x: &Tensor,
    labels: &[usize],
    h: f64,
    coords: usize,
    r: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(params.to_vec());
    let loss = check_function(
        &inputs,
        |g, ids| {
            let fwd = spec.forward(g, &ids[1..], ids[0])?;
            g.softmax_cross_entropy(fwd.logits, labels)
        },
        h,
        Some((coords, &mut *r)),
    )?;
    let weights: Vec<Tensor> = names.iter().map(|n| uniform(r, params.require(n).expect("own names").shape(), -1.0, 1.0)).collect();
    let second = check_function(
        std::slice::from_ref(x),
        |g, ids| {
            let pn = crate::model::constant_params(g, params);
            let fwd = spec.forward(g, &pn, ids[0])?;
            let grads = spec.param_grads_in_graph(g, &fwd, labels)?;
            let mut acc: Option<NodeId> = None;
            for (gr, w) in grads.into_iter().zip(&weights) {
                let wn = g.constant(w.clone());
                let d = g.dot(gr, wn)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, d)?,
                    None => d,
                });
            }
            acc.ok_or_else(|| Error::Spec("model has no parameters".into()))
        },
        h,
        Some((coords, &mut *r)),
    )?;
    Ok(loss.merge(second))
}

/// Distance of the nearest pre-activation from a kink of a piecewise-linear activation.
pub fn kink_margin(spec: &crate::model::ModelSpec, params: &crate::model::Params, x: &Tensor) -> Result<f64> {
    use crate::model::ActivationKind;
    let pre = crate::model::preactivations(spec, params, x)?;
    let kinds: Vec<ActivationKind> = spec.activations().collect();
    Ok(pre
        .iter()
        .zip(kinds)
        .filter(|(_, k)| matches!(k, ActivationKind::Relu | ActivationKind::LeakyRelu))
        .flat_map(|(t, _)| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}

/// Pre-activations closer than this to a kink make central differences meaningless.
pub const KINK_MARGIN: f64 = 1e-3;

/// Checks a zoo model on `trials` random inputs in `[−2, 2]`.
///
/// Weights use a gain of 2 and biases are random so that activations are
/// exercised away from zero; inputs landing within [`KINK_MARGIN`] of a kink are
/// redrawn.
pub fn check_zoo_model(
    arch: crate::model::zoo::Arch,
    act: crate::model::ActivationKind,
    trials: usize,
    seed: u64,
    h: f64,
    coords: usize,
) -> Result<CheckReport> {
    let spec = arch.build([2, 4, 4], 3, act, 6);
    let labels = [0, 2];
    let mut r = crate::rng::stream(seed, 42);
    let mut rep = CheckReport { max_rel_error: 0.0, coordinates: 0 };
    let mut done = 0;
    let mut attempts = 0;
    while done < trials {
        attempts += 1;
        if attempts > 100 * trials {
            return Err(Error::Invalid(format!("could not draw inputs away from kinks for {}", arch.name())));
        }
        let mut params = crate::model::build_model(&spec, crate::model::Init::Scaled(2.0), seed ^ attempts as u64)?;
        for (name, t) in params.clone().iter() {
            if name.ends_with(".bias") {
                *params.get_mut(name).expect("own name") = uniform(&mut r, t.shape(), -0.5, 0.5);
            }
        }
        let x = uniform(&mut r, &[2, 2, 4, 4], -2.0, 2.0);
        if kink_margin(&spec, &params, &x)? < KINK_MARGIN {
            continue;
        }
        rep = rep.merge(check_model(&spec, &params, &x, &labels, h, coords, &mut r)?);
        done += 1;
    }
    Ok(rep)
}
