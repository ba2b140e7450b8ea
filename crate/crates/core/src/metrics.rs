//! Reconstruction quality and gradient similarity.
//!
//! Image metrics take pixel-space tensors in `[0, 1]`. Batch helpers evaluate
//! each image separately and average.

use crate::error::{Error, Result};
use crate::model::{per_sample_grads, ModelSpec, Params};
use crate::tensor::{cosine, Tensor};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)`, capped at 100 dB when the MSE is below `1e-10`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y, "psnr")?;
    Ok(psnr_slices(x.data(), y.data()))
}

fn psnr_slices(x: &[f64], y: &[f64]) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Side length of the SSIM window for an `h × w` image.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m >= 11 {
        11
    } else {
        m.min(7)
    }
}

fn gaussian_1d(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, k);
    let mu_b = filter(b, h, w, k);
    let aa = filter(&prod(&|x, _| x * x), h, w, k);
    let bb = filter(&prod(&|_, y| y * y), h, w, k);
    let ab = filter(&prod(&|x, y| x * y), h, w, k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / n as f64
}

/// Mean local SSIM with a Gaussian window, averaged over channels.
///
/// Accepts `c × h × w` or `n × c × h × w`; batches give the mean over images.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y, "ssim")?;
    let s = x.shape();
    let (n, c, h, w) = match s.len() {
        3 => (1, s[0], s[1], s[2]),
        4 => (s[0], s[1], s[2], s[3]),
        _ => return Err(Error::Shape(format!("ssim: expected c×h×w or n×c×h×w, got {s:?}"))),
    };
    let k = gaussian_1d(ssim_window(h, w));
    let hw = h * w;
    let mut total = 0.0;
    for i in 0..n * c {
        total += ssim_plane(&x.data()[i * hw..(i + 1) * hw], &y.data()[i * hw..(i + 1) * hw], h, w, &k);
    }
    Ok(total / (n * c) as f64)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Jaccard index of the above-median pixel sets; two empty sets score 1.
pub fn jaccard(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y, "jaccard")?;
    let (mx, my) = (median(x.data()), median(y.data()));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let (fa, fb) = (a > mx, b > my);
        inter += usize::from(fa && fb);
        union += usize::from(fa || fb);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `(SSIM(x, x̂) − SSIM(x, x₀)) / SSIM(x, x₀)`.
pub fn rdlv(x: &Tensor, recon: &Tensor, init: &Tensor) -> Result<f64> {
    let s0 = ssim(x, init)?;
    if s0.abs() < 1e-12 {
        return Err(Error::Invalid("rdlv: SSIM between the image and the attack init is zero".into()));
    }
    Ok((ssim(x, recon)? - s0) / s0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub psnr: f64,
    pub ssim: f64,
    pub jaccard: f64,
    /// Missing when no init was given or its SSIM to the truth is zero.
    pub rdlv: Option<f64>,
}

impl MetricSet {
    pub fn compute(x: &Tensor, recon: &Tensor, init: Option<&Tensor>) -> Result<Self> {
        Ok(Self {
            psnr: psnr(x, recon)?,
            ssim: ssim(x, recon)?,
            jaccard: jaccard(x, recon)?,
            rdlv: match init {
                Some(i) => rdlv(x, recon, i).ok(),
                None => None,
            },
        })
    }

    pub fn mean(sets: &[MetricSet]) -> MetricSet {
        let n = sets.len() as f64;
        let rd: Vec<f64> = sets.iter().filter_map(|s| s.rdlv).collect();
        MetricSet {
            psnr: sets.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: sets.iter().map(|s| s.ssim).sum::<f64>() / n,
            jaccard: sets.iter().map(|s| s.jaccard).sum::<f64>() / n,
            rdlv: (rd.len() == sets.len() && !rd.is_empty()).then(|| rd.iter().sum::<f64>() / n),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchMetrics {
    pub per_image: Vec<MetricSet>,
    pub mean: MetricSet,
    /// `order[i]` is the reconstruction matched to ground-truth image `i`.
    pub order: Vec<usize>,
}

/// Pairs each ground-truth image with a reconstruction carrying the same
/// label, greedily by PSNR, then scores every pair.
pub fn evaluate_batch(
    truth: &Tensor,
    truth_labels: &[usize],
    recon: &Tensor,
    recon_labels: &[usize],
    init: Option<&Tensor>,
) -> Result<BatchMetrics> {
    same_shape(truth, recon, "evaluate")?;
    let n = truth.shape()[0];
    if truth_labels.len() != n || recon_labels.len() != n {
        return Err(Error::Shape(format!("evaluate: {n} images need {n} labels on both sides")));
    }
    let mut pairs = Vec::with_capacity(n * n);
    for i in 0..n {
        let ti = truth.slice_rows(i, 1)?;
        for j in 0..n {
            let same = truth_labels[i] == recon_labels[j];
            let p = psnr(&ti, &recon.slice_rows(j, 1)?)?;
            pairs.push((!same, -p, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut order = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, _, i, j) in pairs {
        if order[i] == usize::MAX && !used[j] {
            order[i] = j;
            used[j] = true;
        }
    }
    let mut per_image = Vec::with_capacity(n);
    for (i, &j) in order.iter().enumerate() {
        let init_j = init.map(|t| t.slice_rows(j, 1)).transpose()?;
        per_image.push(MetricSet::compute(&truth.slice_rows(i, 1)?, &recon.slice_rows(j, 1)?, init_j.as_ref())?);
    }
    let mean = MetricSet::mean(&per_image);
    Ok(BatchMetrics { per_image, mean, order })
}

/// Pairwise cosine similarity of per-sample gradients, row-major `n × n`.
pub fn gradient_cosine_matrix(spec: &ModelSpec, params: &Params, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Invalid("gradient cosine matrix needs at least 2 samples".into()));
    }
    let flat: Vec<Vec<f64>> = per_sample_grads(spec, params, x, labels)?.iter().map(|g| g.flatten()).collect();
    for (i, g) in flat.iter().enumerate() {
        if g.iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid(format!("sample {i} has a zero gradient")));
        }
    }
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let c = if i == j { 1.0 } else { cosine(&flat[i], &flat[j]).unwrap_or(0.0) };
            m.data_mut()[i * n + j] = c;
            m.data_mut()[j * n + i] = c;
        }
    }
    Ok(m)
}

pub fn mean_off_diagonal(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.data()[i * n + j];
            }
        }
    }
    s / (n * (n - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let n = c * h * w;
        Tensor::new(vec![c, h, w], (0..n).map(|i| ((i * 7) % n) as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let x = ramp(1, 4, 4);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x = ramp(3, 8, 8);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&x, &x.map(|v| 1.0 - v)).unwrap() < 1.0);
        assert_eq!(ssim_window(8, 8), 7);
        assert_eq!(ssim_window(32, 32), 11);
    }

    #[test]
    fn jaccard_cases() {
        let x = ramp(1, 4, 4);
        assert_eq!(jaccard(&x, &x).unwrap(), 1.0);
        assert!(jaccard(&x, &x.map(|v| 1.0 - v)).unwrap() < 1e-12);
        assert_eq!(jaccard(&x, &x.map(|v| v.powi(3) * 0.5)).unwrap(), 1.0);
    }

    #[test]
    fn rdlv_cases() {
        let x = ramp(1, 8, 8);
        let x0 = Tensor::full(&[1, 8, 8], 0.5).zip_map(&x, |a, b| 0.7 * a + 0.3 * b).unwrap();
        assert!(rdlv(&x, &x0, &x0).unwrap().abs() < 1e-12);
        let s0 = ssim(&x, &x0).unwrap();
        assert!((rdlv(&x, &x, &x0).unwrap() - (1.0 - s0) / s0).abs() < 1e-12);
    }

    #[test]
    fn matching_recovers_permutation() {
        let a = ramp(1, 4, 4);
        let b = a.map(|v| 1.0 - v);
        let truth = Tensor::concat_rows(&[&a.reshape(&[1, 1, 4, 4]).unwrap(), &b.reshape(&[1, 1, 4, 4]).unwrap()]).unwrap();
        let recon = truth.select_rows(&[1, 0]).unwrap();
        let m = evaluate_batch(&truth, &[0, 0], &recon, &[0, 0], None).unwrap();
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.mean.psnr, PSNR_CAP);
    }
}
