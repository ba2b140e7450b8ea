//! The canned trend suite: every claim the laboratory reproduces, checked on
//! fixed seeds and reported as one verdict per criterion.

use std::fmt::Write as _;
use std::time::Instant;

use gia_core::attack::ana::{build_imprint, expected_recovery_count, fishing_manipulate};
use gia_core::attack::opt::FedAvgMode;
use gia_core::autodiff::check::{check_all_primitives, check_zoo_model};
use gia_core::defense::{
    lint_protocol, scan_parameters, validate_architecture, LintRule, ReferenceSpec, ScanThresholds,
};
use gia_core::fl::{synth_dataset, ClientConfig};
use gia_core::model::{build_model, zoo::Arch, ActivationKind, Init};

use crate::config::{CasePoint, ExperimentConfig, Kind, Resolved};
use crate::experiments::{run_case, CaseOutput};
use crate::harness::run_pool;

pub const REFERENCE_SEEDS: [u64; 5] = [11, 23, 37, 41, 53];

/// Finite-difference step and tolerance for the autodiff criterion.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_TRIALS: usize = 20;
/// Parameter and input coordinates sampled per model check.
pub const FD_COORDS: usize = 30;
pub const RECOVERY_TRIALS: usize = 100_000;

pub const CRITERIA: [&str; 13] = [
    "autodiff correctness",
    "closed-form exactness",
    "imprint recovery",
    "recovery-count combinatorics",
    "op-gia batch/resolution/training trends",
    "same-label degradation",
    "fedavg resistance",
    "sigmoid vulnerability",
    "fishing isolation",
    "lti properties",
    "latent-z semantics",
    "defense pipeline",
    "determinism",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub criterion: usize,
    pub seed: Option<u64>,
    pub quantity: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub criterion: usize,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "C{:<2} {} {}: {}",
            self.criterion,
            if self.passed { "PASS" } else { "FAIL" },
            CRITERIA[self.criterion - 1],
            self.detail
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub verdicts: Vec<Verdict>,
    pub measurements: Vec<Measurement>,
    /// Wall-clock seconds per criterion.
    pub runtimes: Vec<(usize, f64)>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for v in &self.verdicts {
            let _ = writeln!(s, "{}", v.line());
        }
        s
    }

    pub const CSV_HEADER: &'static str = "criterion,seed,quantity,value,runtime_s";

    /// Measurements as CSV; the last column is wall-clock and varies between runs.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for m in &self.measurements {
            let rt = self.runtimes.iter().find(|r| r.0 == m.criterion).map_or(0.0, |r| r.1);
            let seed = m.seed.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "C{},{},{},{},{:.3}", m.criterion, seed, m.quantity, m.value, rt);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seeds: Vec<u64>,
    pub threads: usize,
    /// Criteria to run (1..=12); empty runs all of them.
    pub only: Vec<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { seeds: REFERENCE_SEEDS.to_vec(), threads: 1, only: Vec::new() }
    }
}

type SeedValues = Result<Vec<(String, f64)>, String>;

fn get(v: &[(String, f64)], key: &str) -> f64 {
    v.iter().find(|(k, _)| k == key).map_or(f64::NAN, |x| x.1)
}

/// A resolved case of `kind` after applying `edit` to the default config.
fn case(kind: Kind, point: CasePoint, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<Resolved, String> {
    let mut cfg = ExperimentConfig::from_toml(&format!("kind = \"{}\"\n", kind.name())).map_err(|e| e.to_string())?;
    edit(&mut cfg);
    cfg.resolve(&point).map_err(|e| e.to_string())
}

fn run(r: &Resolved, seed: u64) -> Result<CaseOutput, String> {
    run_case(r, seed).map_err(|e| format!("{} seed {seed}: {e}", r.kind.name()))
}

fn psnr_of(o: &CaseOutput) -> f64 {
    o.metrics.map_or(f64::NAN, |m| m.psnr)
}

fn ssim_of(o: &CaseOutput) -> f64 {
    o.metrics.map_or(f64::NAN, |m| m.ssim)
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Runs `f` for every seed on the pool and records its quantities.
fn per_seed<F>(id: usize, opts: &BenchOptions, out: &mut Vec<Measurement>, f: F) -> Vec<(u64, SeedValues)>
where
    F: Fn(u64) -> SeedValues + Sync + Send,
{
    let res = run_pool(opts.seeds.clone(), opts.threads, |s| (s, f(s)));
    for (s, r) in &res {
        if let Ok(vals) = r {
            for (k, v) in vals {
                out.push(Measurement { criterion: id, seed: Some(*s), quantity: k.clone(), value: *v });
            }
        }
    }
    res
}

fn first_error(res: &[(u64, SeedValues)]) -> Option<String> {
    res.iter().find_map(|(_, r)| r.as_ref().err().cloned())
}

fn count(res: &[(u64, SeedValues)], pred: impl Fn(&[(String, f64)]) -> bool) -> usize {
    res.iter().filter(|(_, r)| r.as_ref().is_ok_and(|v| pred(v))).count()
}

fn mean_of(res: &[(u64, SeedValues)], key: &str) -> f64 {
    let v: Vec<f64> = res.iter().filter_map(|(_, r)| r.as_ref().ok().map(|v| get(v, key))).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn majority(n: usize, total: usize) -> bool {
    2 * n > total
}

fn failed(id: usize, detail: String) -> Verdict {
    Verdict { criterion: id, passed: false, detail }
}

fn c1_autodiff(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let seed = opts.seeds[0];
    let prims = match check_all_primitives(FD_TRIALS, seed, FD_STEP) {
        Ok(p) => p,
        Err(e) => return failed(1, format!("primitive check errored: {e}")),
    };
    let mut worst: f64 = 0.0;
    for (name, rep) in &prims {
        out.push(Measurement { criterion: 1, seed: Some(seed), quantity: format!("primitive:{name}"), value: rep.max_rel_error });
        worst = worst.max(rep.max_rel_error);
    }
    let combos: Vec<(Arch, ActivationKind)> =
        Arch::ALL.iter().flat_map(|&a| ActivationKind::ALL.iter().map(move |&k| (a, k))).collect();
    let models = run_pool(combos, opts.threads, |(a, k)| (a, k, check_zoo_model(a, k, FD_TRIALS, seed, FD_STEP, FD_COORDS)));
    let mut worst_model: f64 = 0.0;
    for (a, k, rep) in models {
        match rep {
            Ok(rep) => {
                out.push(Measurement {
                    criterion: 1,
                    seed: Some(seed),
                    quantity: format!("model:{}:{}", a.name(), k.name()),
                    value: rep.max_rel_error,
                });
                worst_model = worst_model.max(rep.max_rel_error);
            }
            Err(e) => return failed(1, format!("{} {} check errored: {e}", a.name(), k.name())),
        }
    }
    let passed = worst < FD_TOLERANCE && worst_model < FD_TOLERANCE;
    Verdict {
        criterion: 1,
        passed,
        detail: format!(
            "max rel error {worst:.2e} over {} primitives, {worst_model:.2e} over 16 models (limit {FD_TOLERANCE:.0e})",
            prims.len()
        ),
    }
}

fn c2_closed_form(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(2, opts, out, |s| {
        let r = case(Kind::ClosedForm, CasePoint::default(), |_| {})?;
        let o = run(&r, s)?;
        Ok(vec![
            ("max_abs_error".into(), o.value("max_abs_error").unwrap_or(f64::NAN)),
            ("psnr".into(), psnr_of(&o)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(2, e);
    }
    let ok = count(&res, |v| get(v, "max_abs_error") < 1e-8 && get(v, "psnr") == 100.0);
    let worst = res.iter().filter_map(|(_, r)| r.as_ref().ok()).map(|v| get(v, "max_abs_error")).fold(0.0, f64::max);
    Verdict {
        criterion: 2,
        passed: ok == res.len(),
        detail: format!("{ok}/{} seeds exact, worst max-abs error {worst:.2e}, PSNR at the 100 dB cap", res.len()),
    }
}

fn c3_imprint(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(3, opts, out, |s| {
        let mut v = Vec::new();
        for (b, k) in [(1usize, 128usize), (16, 128), (8, 1000)] {
            let r = case(Kind::Imprint, CasePoint { batch_size: Some(b), ..Default::default() }, |c| c.attack.bins = Some(k))?;
            let o = run(&r, s)?;
            v.push((format!("b{b}k{k}:recovered"), o.value("recovered").unwrap_or(f64::NAN)));
            v.push((format!("b{b}k{k}:singly_occupied"), o.value("singly_occupied").unwrap_or(f64::NAN)));
        }
        Ok(v)
    });
    if let Some(e) = first_error(&res) {
        return failed(3, e);
    }
    let single = count(&res, |v| get(v, "b1k128:recovered") == 1.0);
    let oracle = count(&res, |v| get(v, "b16k128:recovered") == get(v, "b16k128:singly_occupied"));
    let rate = mean_of(&res, "b8k1000:recovered") / 8.0;
    let n = res.len();
    Verdict {
        criterion: 3,
        passed: single == n && oracle == n && rate >= 0.97,
        detail: format!("B=1 exact on {single}/{n}; B=16,k=128 equals occupancy on {oracle}/{n}; B=8,k=1000 rate {:.1}%", 100.0 * rate),
    }
}

fn c4_recovery(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let seed = opts.seeds[0];
    let cases = vec![(3usize, 8usize), (4, 16), (8, 64)];
    let res = run_pool(cases, opts.threads, |(b, k)| (b, k, expected_recovery_count(b, k, RECOVERY_TRIALS, seed)));
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let n = res.len();
    for (b, k, est) in res {
        let est = match est {
            Ok(e) => e,
            Err(e) => return failed(4, format!("B={b} k={k}: {e}")),
        };
        let (Some(main), Some(corr), Some(cse)) = (est.main_sum, est.correction, est.correction_se) else {
            return failed(4, format!("B={b} k={k}: main sum undefined"));
        };
        let formula = main + corr;
        let se = (est.mc_se.powi(2) + cse.powi(2)).sqrt();
        let z = (formula - est.mc_mean).abs() / se;
        worst = worst.max(z);
        if z <= 3.0 {
            ok += 1;
        }
        for (q, v) in [("main_sum", main), ("correction", corr), ("formula", formula), ("mc_mean", est.mc_mean), ("z", z)] {
            out.push(Measurement { criterion: 4, seed: Some(seed), quantity: format!("b{b}k{k}:{q}"), value: v });
        }
    }
    Verdict {
        criterion: 4,
        passed: ok == n,
        detail: format!("{ok}/{n} (B,k) pairs within 3 SE at {RECOVERY_TRIALS} trials, worst {worst:.2} SE"),
    }
}

fn c5_op_gia(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(5, opts, out, |s| {
        let p = |b: usize, res: usize, trained: bool| -> Result<f64, String> {
            let pt = CasePoint { batch_size: Some(b), resolution: Some(res), trained: Some(trained), ..Default::default() };
            Ok(psnr_of(&run(&case(Kind::OpGia, pt, |_| {})?, s)?))
        };
        let (b1, b4, b16) = (p(1, 8, false)?, p(4, 8, false)?, p(16, 8, false)?);
        let r16 = p(4, 16, false)?;
        let tr = p(4, 8, true)?;
        Ok(vec![
            ("psnr_b1".into(), b1),
            ("psnr_b4".into(), b4),
            ("psnr_b16".into(), b16),
            ("psnr_16x16_b4".into(), r16),
            ("psnr_trained_b4".into(), tr),
            ("batch_trend".into(), bit(b1 > b4 && b4 > b16 && b1 - b16 >= 1.0)),
            ("resolution_trend".into(), bit(b4 > r16)),
            ("training_trend".into(), bit(b4 >= tr + 1.0)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(5, e);
    }
    let all3 = count(&res, |v| get(v, "batch_trend") + get(v, "resolution_trend") + get(v, "training_trend") == 3.0);
    let n = res.len();
    let need = if n >= 5 { n - 1 } else { n };
    Verdict {
        criterion: 5,
        passed: all3 >= need,
        detail: format!(
            "3/3 trends on {all3}/{n} seeds; mean PSNR B1/B4/B16 {:.1}/{:.1}/{:.1}, 16x16 {:.1}, trained {:.1} dB",
            mean_of(&res, "psnr_b1"),
            mean_of(&res, "psnr_b4"),
            mean_of(&res, "psnr_b16"),
            mean_of(&res, "psnr_16x16_b4"),
            mean_of(&res, "psnr_trained_b4")
        ),
    }
}

pub const DUPLICATE_COUNTS: [usize; 4] = [0, 2, 3, 4];

fn c6_same_label(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(6, opts, out, |s| {
        let mut v = Vec::new();
        let (mut cos, mut ps) = (Vec::new(), Vec::new());
        for d in DUPLICATE_COUNTS {
            let pt = CasePoint { batch_size: Some(4), duplicates: Some(d), ..Default::default() };
            let o = run(&case(Kind::OpGia, pt, |c| c.dataset.size = Some(80))?, s)?;
            cos.push(o.value("cos_mean").unwrap_or(f64::NAN));
            ps.push(psnr_of(&o));
            v.push((format!("d{d}:cos_mean"), *cos.last().unwrap()));
            v.push((format!("d{d}:psnr"), *ps.last().unwrap()));
        }
        v.push(("cos_monotone".into(), bit(cos.windows(2).all(|w| w[1] >= w[0]))));
        v.push(("psnr_monotone".into(), bit(ps.windows(2).all(|w| w[1] <= w[0]))));
        Ok(v)
    });
    if let Some(e) = first_error(&res) {
        return failed(6, e);
    }
    let n = res.len();
    let c = count(&res, |v| get(v, "cos_monotone") == 1.0);
    let p = count(&res, |v| get(v, "psnr_monotone") == 1.0);
    Verdict {
        criterion: 6,
        passed: majority(c, n) && majority(p, n),
        detail: format!("cosine non-decreasing on {c}/{n} seeds, PSNR non-increasing on {p}/{n} seeds"),
    }
}

fn c7_fedavg(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(7, opts, out, |s| {
        let m = |mode: FedAvgMode| -> Result<f64, String> {
            let pt = CasePoint { mode: Some(mode), ..Default::default() };
            Ok(psnr_of(&run(&case(Kind::Fedavg, pt, |_| {})?, s)?))
        };
        let (st, wk, no) = (m(FedAvgMode::Strong)?, m(FedAvgMode::Weak)?, m(FedAvgMode::None)?);
        Ok(vec![
            ("psnr_strong".into(), st),
            ("psnr_weak".into(), wk),
            ("psnr_none".into(), no),
            ("ordered".into(), bit(st >= wk + 0.5 && wk >= no + 0.5)),
            ("none_gap".into(), bit(no < st - 2.0)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(7, e);
    }
    let n = res.len();
    let ord = count(&res, |v| get(v, "ordered") == 1.0);
    let gap = count(&res, |v| get(v, "none_gap") == 1.0);
    Verdict {
        criterion: 7,
        passed: majority(ord, n) && gap == n,
        detail: format!(
            "strong > weak > none by 0.5 dB on {ord}/{n} seeds, none < strong - 2 dB on {gap}/{n}; mean {:.1}/{:.1}/{:.1} dB",
            mean_of(&res, "psnr_strong"),
            mean_of(&res, "psnr_weak"),
            mean_of(&res, "psnr_none")
        ),
    }
}

fn gen_w(s: u64, act: ActivationKind) -> Result<CaseOutput, String> {
    run(&case(Kind::GenW, CasePoint { activation: Some(act), ..Default::default() }, |_| {})?, s)
}

fn c8_sigmoid(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(8, opts, out, |s| {
        let sig = gen_w(s, ActivationKind::Sigmoid)?;
        let relu = gen_w(s, ActivationKind::Relu)?;
        Ok(vec![
            ("ssim_sigmoid".into(), ssim_of(&sig)),
            ("ssim_relu".into(), ssim_of(&relu)),
            ("locality_sigmoid".into(), sig.value("locality").unwrap_or(f64::NAN)),
            ("locality_relu".into(), relu.value("locality").unwrap_or(f64::NAN)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(8, e);
    }
    let gap = mean_of(&res, "ssim_sigmoid") - mean_of(&res, "ssim_relu");
    let local = count(&res, |v| get(v, "locality_sigmoid") >= 0.9 && get(v, "locality_relu") >= 0.9);
    let n = res.len();
    Verdict {
        criterion: 8,
        passed: gap > 0.2 && local == n,
        detail: format!(
            "mean SSIM sigmoid {:.3} vs relu {:.3} (gap {gap:.3}); locality >= 90% on {local}/{n} seeds",
            mean_of(&res, "ssim_sigmoid"),
            mean_of(&res, "ssim_relu")
        ),
    }
}

fn c9_fishing(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(9, opts, out, |s| {
        let o = run(&case(Kind::Fishing, CasePoint::default(), |c| c.attack.beta = Some(10.0))?, s)?;
        let v = |k: &str| o.value(k).unwrap_or(f64::NAN);
        Ok(vec![
            ("isolation".into(), v("isolation")),
            ("isolation_plain".into(), v("isolation_plain")),
            ("fishing_target_psnr".into(), psnr_of(&o)),
            ("plain_best_psnr".into(), v("plain_best_psnr")),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(9, e);
    }
    let n = res.len();
    let iso = count(&res, |v| get(v, "isolation") > 0.9 && get(v, "isolation") > get(v, "isolation_plain") + 0.3);
    let inv = count(&res, |v| get(v, "fishing_target_psnr") >= get(v, "plain_best_psnr") + 2.0);
    Verdict {
        criterion: 9,
        passed: iso == n && majority(inv, n),
        detail: format!(
            "isolation > 0.9 and > plain + 0.3 on {iso}/{n} seeds (mean {:.3} vs {:.3}); fishing PSNR >= plain best + 2 dB on {inv}/{n}",
            mean_of(&res, "isolation"),
            mean_of(&res, "isolation_plain")
        ),
    }
}

fn c10_lti(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(10, opts, out, |s| {
        let matched = run(&case(Kind::Lti, CasePoint::default(), |_| {})?, s)?;
        let shifted = run(&case(Kind::Lti, CasePoint::default(), |c| c.attack.aux_family = Some(1))?, s)?;
        let trained = run(&case(Kind::Lti, CasePoint { trained: Some(true), ..Default::default() }, |_| {})?, s)?;
        Ok(vec![
            ("psnr_matched".into(), psnr_of(&matched)),
            ("psnr_baseline".into(), matched.value("baseline_psnr").unwrap_or(f64::NAN)),
            ("psnr_shifted".into(), psnr_of(&shifted)),
            ("psnr_trained".into(), psnr_of(&trained)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(10, e);
    }
    let (m, b, sh, tr) =
        (mean_of(&res, "psnr_matched"), mean_of(&res, "psnr_baseline"), mean_of(&res, "psnr_shifted"), mean_of(&res, "psnr_trained"));
    Verdict {
        criterion: 10,
        passed: m > b + 3.0 && m > sh + 3.0 && (m - tr).abs() < 2.0,
        detail: format!("mean PSNR matched {m:.1}, mean-image {b:.1}, shifted aux {sh:.1}, trained target {tr:.1} dB"),
    }
}

fn c11_latent_z(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let res = per_seed(11, opts, out, |s| {
        let z = run(&case(Kind::GenZ, CasePoint::default(), |_| {})?, s)?;
        let w = gen_w(s, ActivationKind::Sigmoid)?;
        let noise = run(&case(Kind::GenZ, CasePoint::default(), |c| c.attack.noise_gradient = true)?, s);
        let finite = noise.as_ref().is_ok_and(|o| o.metrics.is_some_and(|m| m.psnr.is_finite() && m.ssim.is_finite()));
        Ok(vec![
            ("ssim_latent_z".into(), ssim_of(&z)),
            ("ssim_gen_w".into(), ssim_of(&w)),
            ("decoder_heldout_mse".into(), z.value("decoder_heldout_mse").unwrap_or(f64::NAN)),
            ("noise_run_ok".into(), bit(finite)),
        ])
    });
    if let Some(e) = first_error(&res) {
        return failed(11, e);
    }
    let n = res.len();
    let below = count(&res, |v| get(v, "ssim_latent_z") < get(v, "ssim_gen_w"));
    let noise = count(&res, |v| get(v, "noise_run_ok") == 1.0);
    Verdict {
        criterion: 11,
        passed: below == n && noise == n,
        detail: format!(
            "latent-z SSIM below gen-W on {below}/{n} seeds (mean {:.3} vs {:.3}); noise-gradient runs finished on {noise}/{n}",
            mean_of(&res, "ssim_latent_z"),
            mean_of(&res, "ssim_gen_w")
        ),
    }
}

/// Architectures, activations, batch sizes and epochs with the lint rules each must raise.
pub fn lint_table() -> Vec<(Arch, ActivationKind, usize, usize, Vec<LintRule>)> {
    use ActivationKind::*;
    use LintRule::*;
    vec![
        (Arch::Mlp2, Sigmoid, 1, 1, vec![SigmoidActivation, SmallBatch, SingleEpoch, ClosedFormExposure]),
        (Arch::CnnS, Relu, 16, 2, vec![]),
        (Arch::LinearFirst, Relu, 16, 2, vec![ClosedFormExposure]),
        (Arch::CnnS, Sigmoid, 16, 2, vec![SigmoidActivation]),
        (Arch::CnnS, Relu, 4, 2, vec![SmallBatch]),
        (Arch::CnnS, Tanh, 8, 1, vec![SingleEpoch]),
        (Arch::CnnSDeep, LeakyRelu, 8, 3, vec![]),
        (Arch::LinearFirst, Sigmoid, 2, 1, vec![SigmoidActivation, SmallBatch, SingleEpoch, ClosedFormExposure]),
        (Arch::Mlp2, Relu, 32, 5, vec![ClosedFormExposure]),
        (Arch::CnnSDeep, Sigmoid, 7, 2, vec![SigmoidActivation, SmallBatch]),
    ]
}

pub const CLEAN_INITS: usize = 100;
pub const IMPRINT_BINS: [usize; 2] = [64, 128];
pub const FISHING_BETAS: [f64; 3] = [5.0, 10.0, 20.0];

fn c12_defense(opts: &BenchOptions, out: &mut Vec<Measurement>) -> Verdict {
    let th = ScanThresholds::default();
    let shape = [3, 8, 8];
    // Artifact corpus: every architecture on every seed.
    let jobs: Vec<(Arch, u64)> = Arch::ALL.iter().flat_map(|&a| opts.seeds.iter().map(move |&s| (a, s))).collect();
    let corpus = run_pool(jobs, opts.threads, |(arch, s)| -> Result<(usize, usize, usize, usize), String> {
        let spec = arch.build(shape, 10, ActivationKind::Relu, 32);
        let params = build_model(&spec, Init::KaimingUniform, s).map_err(|e| e.to_string())?;
        let reference = ReferenceSpec::from_spec(&spec, &[ActivationKind::Relu]);
        let data = synth_dataset(64, 3, 8, 8, 10, s).map_err(|e| e.to_string())?;
        let cal = synth_dataset(512, 3, 8, 8, 10, s + 77).map_err(|e| e.to_string())?;
        let calx = data.norm.normalize(&cal.images);
        let (mut imp_hit, mut imp_n, mut fish_hit, mut fish_n) = (0, 0, 0, 0);
        for k in IMPRINT_BINS {
            let (s2, p2, _) = build_imprint(&spec, &params, k, &calx, s).map_err(|e| e.to_string())?;
            let arch_caught = !validate_architecture(&s2, &reference).passed();
            let flagged = scan_parameters(&p2, &s2, &th).iter().any(|f| f.rule.signature() == "imprint");
            imp_n += 1;
            imp_hit += usize::from(arch_caught && flagged);
        }
        for beta in FISHING_BETAS {
            let (_, man) = fishing_manipulate(&spec, &params, (s % 10) as usize, beta).map_err(|e| e.to_string())?;
            let flagged = scan_parameters(&man, &spec, &th).iter().any(|f| f.rule.signature() == "fishing");
            fish_n += 1;
            fish_hit += usize::from(flagged);
        }
        Ok((imp_hit, imp_n, fish_hit, fish_n))
    });
    let (mut ih, mut inn, mut fh, mut fnn) = (0, 0, 0, 0);
    for r in corpus {
        match r {
            Ok((a, b, c, d)) => {
                ih += a;
                inn += b;
                fh += c;
                fnn += d;
            }
            Err(e) => return failed(12, e),
        }
    }
    // False positives over clean initializations of every architecture and activation.
    let clean = run_pool((0..CLEAN_INITS).collect(), opts.threads, |i| -> Result<usize, String> {
        let arch = Arch::ALL[i % Arch::ALL.len()];
        let act = ActivationKind::ALL[(i / Arch::ALL.len()) % ActivationKind::ALL.len()];
        let spec = arch.build(shape, 10, act, 32);
        let params = build_model(&spec, Init::KaimingUniform, 1000 + i as u64).map_err(|e| e.to_string())?;
        let reference = ReferenceSpec::from_spec(&spec, &[act]);
        let arch_fail = !validate_architecture(&spec, &reference).passed();
        Ok(scan_parameters(&params, &spec, &th).len() + usize::from(arch_fail))
    });
    let mut fp = 0;
    for r in clean {
        match r {
            Ok(n) => fp += usize::from(n > 0),
            Err(e) => return failed(12, e),
        }
    }
    let table = lint_table();
    let mut lint_ok = 0;
    for (arch, act, b, e, expected) in &table {
        let spec = arch.build(shape, 10, *act, 32);
        let cfg = ClientConfig { batch_size: *b, epochs: *e, lr: 0.05, seed: 0 };
        let got: Vec<LintRule> = lint_protocol(&cfg, &spec, th.min_batch).iter().map(|f| f.rule).collect();
        lint_ok += usize::from(&got == expected);
    }
    for (q, v) in [
        ("imprint_detected", ih),
        ("imprint_artifacts", inn),
        ("fishing_detected", fh),
        ("fishing_artifacts", fnn),
        ("clean_false_positives", fp),
        ("lint_matches", lint_ok),
    ] {
        out.push(Measurement { criterion: 12, seed: None, quantity: q.into(), value: v as f64 });
    }
    Verdict {
        criterion: 12,
        passed: ih == inn && fh == fnn && fp == 0 && lint_ok == table.len(),
        detail: format!(
            "imprint {ih}/{inn} and fishing {fh}/{fnn} artifacts flagged; {fp} false positives over {CLEAN_INITS} clean inits; lint {lint_ok}/{} configs exact",
            table.len()
        ),
    }
}

type Criterion = fn(&BenchOptions, &mut Vec<Measurement>) -> Verdict;

const SUITE: [Criterion; 12] = [
    c1_autodiff,
    c2_closed_form,
    c3_imprint,
    c4_recovery,
    c5_op_gia,
    c6_same_label,
    c7_fedavg,
    c8_sigmoid,
    c9_fishing,
    c10_lti,
    c11_latent_z,
    c12_defense,
];

/// Runs criteria 1–12 and returns their verdicts and measurements.
pub fn bench_trends(opts: &BenchOptions) -> BenchReport {
    bench_trends_with(opts, |_| {})
}

/// As [`bench_trends`], calling `on_verdict` as each criterion finishes.
pub fn bench_trends_with(opts: &BenchOptions, mut on_verdict: impl FnMut(&Verdict)) -> BenchReport {
    let mut rep = BenchReport::default();
    for (i, f) in SUITE.iter().enumerate() {
        let id = i + 1;
        if !opts.only.is_empty() && !opts.only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = if opts.seeds.is_empty() { failed(id, "no seeds".into()) } else { f(opts, &mut rep.measurements) };
        rep.runtimes.push((id, t.elapsed().as_secs_f64()));
        on_verdict(&v);
        rep.verdicts.push(v);
    }
    rep
}

/// Verdict for two runs of the suite: identical measurements and verdicts.
pub fn determinism_verdict(a: &BenchReport, b: &BenchReport) -> Verdict {
    let strip = |r: &BenchReport| crate::harness::without_runtime(&r.to_csv()).unwrap_or_default();
    let (ca, cb) = (strip(a), strip(b));
    let same_rows = ca == cb;
    let same_verdicts = a.verdicts == b.verdicts;
    let differing = ca.lines().zip(cb.lines()).filter(|(x, y)| x != y).count();
    Verdict {
        criterion: 13,
        passed: same_rows && same_verdicts && !a.measurements.is_empty(),
        detail: format!(
            "two runs: {} measurement rows, {} differing, verdicts {}",
            a.measurements.len(),
            differing + ca.lines().count().abs_diff(cb.lines().count()),
            if same_verdicts { "identical" } else { "differ" }
        ),
    }
}

/// The full acceptance suite: criteria 1–12, then a second run for criterion 13.
pub fn acceptance(opts: &BenchOptions, mut on_verdict: impl FnMut(&Verdict)) -> (BenchReport, BenchReport) {
    let first = bench_trends_with(opts, &mut on_verdict);
    let mut second = bench_trends(opts);
    let v = determinism_verdict(&first, &second);
    on_verdict(&v);
    second.verdicts.push(v.clone());
    let mut first = first;
    first.verdicts.push(v);
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lint_table_covers_every_rule_and_the_empty_set() {
        let t = lint_table();
        assert_eq!(t.len(), 10);
        for r in [LintRule::SigmoidActivation, LintRule::SmallBatch, LintRule::SingleEpoch, LintRule::ClosedFormExposure] {
            assert!(t.iter().any(|row| row.4 == vec![r]), "{r:?} never appears alone");
        }
        assert!(t.iter().any(|row| row.4.is_empty()));
    }

    #[test]
    fn csv_has_one_row_per_measurement() {
        let rep = BenchReport {
            verdicts: vec![],
            measurements: vec![Measurement { criterion: 4, seed: Some(11), quantity: "z".into(), value: 0.5 }],
            runtimes: vec![(4, 1.25)],
        };
        assert_eq!(rep.to_csv(), "criterion,seed,quantity,value,runtime_s\nC4,11,z,0.5,1.250\n");
    }

    #[test]
    fn determinism_ignores_runtime() {
        let m = vec![Measurement { criterion: 2, seed: Some(11), quantity: "psnr".into(), value: 100.0 }];
        let a = BenchReport { verdicts: vec![], measurements: m.clone(), runtimes: vec![(2, 1.0)] };
        let b = BenchReport { verdicts: vec![], measurements: m, runtimes: vec![(2, 7.0)] };
        assert!(determinism_verdict(&a, &b).passed);
        let mut c = b.clone();
        c.measurements[0].value = 99.0;
        assert!(!determinism_verdict(&a, &c).passed);
    }
}
