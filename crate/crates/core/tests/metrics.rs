use gia_core::metrics::{jaccard, mean_off_diagonal, psnr, rdlv, ssim, ssim_window, MetricSet, PSNR_CAP, SSIM_SIGMA};
use gia_core::rng;
use gia_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn image(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut mse = 0.0;
    for i in 0..a.len() {
        mse += (a[i] - b[i]).powi(2);
    }
    mse /= a.len() as f64;
    -10.0 * mse.log10()
}

/// Direct 2-D window sums with the non-separable Gaussian.
fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = ssim_window(h, w);
    let mid = (n as f64 - 1.0) / 2.0;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = (-((i as f64 - mid).powi(2) + (j as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for ch in 0..c {
        let px = |t: &Tensor, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
        for y in 0..=h - n {
            for x in 0..=w - n {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let (va, vb, g) = (px(a, y + i, x + j), px(b, y + i, x + j), k[i * n + j]);
                        ma += g * va;
                        mb += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let (sa, sb, sab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * sab + c2)) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn psnr_matches_the_definition_and_caps() {
    let a = image(&[3, 8, 8], 1);
    let b = image(&[3, 8, 8], 2);
    assert!((psnr(&a, &b).unwrap() - psnr_oracle(a.data(), b.data())).abs() < 1e-10);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let c = a.map(|v| v + 0.1);
    assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&a, &Tensor::zeros(&[3, 8, 7])).is_err());
}

#[test]
fn ssim_matches_direct_window_sums() {
    for (shape, seed) in [([3, 8, 8], 3), ([1, 16, 16], 4), ([3, 12, 9], 5)] {
        let a = image(&shape, seed);
        let b = a.zip_map(&image(&shape, seed + 10), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-12, "{shape:?}");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn window_follows_the_smaller_side() {
    assert_eq!(ssim_window(32, 32), 11);
    assert_eq!(ssim_window(8, 8), 7);
    assert_eq!(ssim_window(16, 10), 7);
    assert_eq!(ssim_window(5, 9), 5);
}

#[test]
fn jaccard_counts_above_median_pixels() {
    let a = Tensor::new(vec![1, 2, 2], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
    let b = Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, 0.8, 0.2]).unwrap();
    // sets {0, 1} and {0, 2}: one shared of three
    assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    let flat = Tensor::full(&[1, 2, 2], 0.5);
    assert_eq!(jaccard(&flat, &flat).unwrap(), 1.0);
}

#[test]
fn rdlv_is_zero_without_progress_and_positive_with_it() {
    let x = image(&[3, 8, 8], 6);
    let init = image(&[3, 8, 8], 7);
    assert!(rdlv(&x, &init, &init).unwrap().abs() < 1e-12);
    let better = x.zip_map(&init, |a, b| 0.9 * a + 0.1 * b).unwrap();
    assert!(rdlv(&x, &better, &init).unwrap() > 0.0);
    let m = MetricSet::compute(&x, &better, Some(&init)).unwrap();
    assert!(m.rdlv.is_some());
    assert!(MetricSet::compute(&x, &better, None).unwrap().rdlv.is_none());
}

#[test]
fn off_diagonal_mean_skips_the_diagonal() {
    let m = Tensor::new(vec![3, 3], vec![1.0, 0.2, 0.4, 0.2, 1.0, 0.6, 0.4, 0.6, 1.0]).unwrap();
    assert!((mean_off_diagonal(&m) - 0.4).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in 0u64..1000, s2 in 1000u64..2000) {
        let a = image(&[3, 8, 8], s1);
        let b = image(&[3, 8, 8], s2);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        let j = jaccard(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
    }

    #[test]
    fn shape_mismatches_are_errors(h in 1usize..6, w in 1usize..6) {
        let a = Tensor::zeros(&[1, h, w]);
        let b = Tensor::zeros(&[1, h, w + 1]);
        prop_assert!(psnr(&a, &b).is_err());
        prop_assert!(ssim(&a, &b).is_err());
        prop_assert!(jaccard(&a, &b).is_err());
    }
}
