//! Sweep execution: expand the grid, run each case in isolation on a bounded
//! pool, and write `results.csv`, image dumps and a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gia_core::exec::Exec;
use serde::Serialize;

use crate::config::{CasePoint, ExperimentConfig};
use crate::experiments::{run_case, CaseOutput};
use crate::image::dump_image;

/// Bumped whenever a results.csv column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 21] = [
    "experiment",
    "case",
    "kind",
    "arch",
    "activation",
    "batch_size",
    "resolution",
    "duplicates",
    "trained",
    "epochs",
    "mode",
    "seed",
    "status",
    "psnr",
    "ssim",
    "jaccard",
    "rdlv",
    "values",
    "error",
    "artifacts",
    "runtime_s",
];

/// Columns that depend on wall-clock time and are excluded from determinism checks.
pub const RUNTIME_COLUMNS: [&str; 1] = ["runtime_s"];

pub const THREADS_ENV: &str = "GIA_LAB_THREADS";

/// `v<crate version>`, followed by the build's `git describe` when supplied at compile time.
pub fn version_string() -> String {
    match option_env!("GIA_LAB_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Pool size: the environment override, else the machine's core count.
pub fn pool_size() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{s}'")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` over `items` on a pool of `threads` workers, keeping input order.
pub fn run_pool<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(|| Exec::Parallel.map(items, f));
        }
    }
    let _ = threads;
    Exec::Sequential.map(items, f)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub case: String,
    pub kind: String,
    pub arch: String,
    pub activation: String,
    pub batch_size: usize,
    pub resolution: usize,
    pub duplicates: String,
    pub trained: bool,
    pub epochs: usize,
    pub mode: String,
    pub seed: u64,
    pub status: String,
    pub psnr: String,
    pub ssim: String,
    pub jaccard: String,
    pub rdlv: String,
    pub values: String,
    pub error: String,
    pub artifacts: String,
    pub runtime_s: String,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "case panicked".to_string()
    }
}

/// Rejects outputs carrying NaN or infinite numbers.
fn check_finite(out: &CaseOutput) -> Result<(), String> {
    if let Some(m) = &out.metrics {
        let vals = [m.psnr, m.ssim, m.jaccard, m.rdlv.unwrap_or(0.0)];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite metric".into());
        }
    }
    if let Some((k, _)) = out.values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(format!("non-finite value '{k}'"));
    }
    Ok(())
}

pub struct Job {
    pub index: usize,
    pub point: CasePoint,
    pub seed: u64,
}

/// All `(point, seed)` pairs in grid order.
pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for point in cfg.points() {
        for &seed in &cfg.seeds {
            out.push(Job { index: out.len(), point: point.clone(), seed });
        }
    }
    out
}

/// Runs one case and turns any error or panic into an error row.
pub fn execute(cfg: &ExperimentConfig, job: &Job, dump_dir: Option<&Path>) -> ResultRow {
    let start = Instant::now();
    let case = job.point.id();
    let resolved = cfg.resolve(&job.point);
    let mut row = ResultRow {
        experiment: cfg.name.clone(),
        case: case.clone(),
        kind: cfg.kind.name().to_string(),
        arch: String::new(),
        activation: String::new(),
        batch_size: 0,
        resolution: 0,
        duplicates: String::new(),
        trained: false,
        epochs: 0,
        mode: String::new(),
        seed: job.seed,
        status: "error".into(),
        psnr: String::new(),
        ssim: String::new(),
        jaccard: String::new(),
        rdlv: String::new(),
        values: String::new(),
        error: String::new(),
        artifacts: String::new(),
        runtime_s: String::new(),
    };
    let r = match resolved {
        Ok(r) => r,
        Err(e) => {
            row.error = one_line(&e.to_string());
            row.runtime_s = format!("{:.3}", start.elapsed().as_secs_f64());
            return row;
        }
    };
    row.arch = r.arch.name().to_string();
    row.activation = r.activation.name().to_string();
    row.batch_size = r.batch_size;
    row.resolution = r.resolution;
    row.duplicates = r.duplicates.map(|d| d.to_string()).unwrap_or_default();
    row.trained = r.trained;
    row.epochs = r.client_epochs;
    row.mode = r.mode.name().to_string();
    let result = catch_unwind(AssertUnwindSafe(|| run_case(&r, job.seed)))
        .map_err(panic_message)
        .and_then(|res| res.map_err(|e| e.to_string()))
        .and_then(|out| check_finite(&out).map(|_| out));
    match result {
        Ok(out) => {
            row.status = "ok".into();
            if let Some(m) = out.metrics {
                row.psnr = num(Some(m.psnr));
                row.ssim = num(Some(m.ssim));
                row.jaccard = num(Some(m.jaccard));
                row.rdlv = num(m.rdlv);
            }
            row.values = out.values.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            if let Some(dir) = dump_dir {
                let mut paths = Vec::new();
                for (stem, img) in &out.images {
                    let rel = format!("images/{}_{}_s{}_{}.ppm", cfg.name, case, job.seed, stem);
                    match dump_image(img, &dir.join(&rel)) {
                        Ok(()) => paths.push(rel),
                        Err(e) => {
                            row.status = "error".into();
                            row.error = one_line(&format!("image dump failed: {e}"));
                        }
                    }
                }
                row.artifacts = paths.join(";");
            }
        }
        Err(e) => row.error = one_line(&e),
    }
    row.runtime_s = format!("{:.3}", start.elapsed().as_secs_f64());
    row
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    w.flush()
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: String,
    csv_schema: u32,
    columns: Vec<&'a str>,
    runtime_columns: Vec<&'a str>,
    threads: usize,
    cases: usize,
    rows: usize,
    failures: usize,
    config: &'a ExperimentConfig,
}

/// Runs the whole sweep into `out` (or the configured output directory).
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, threads: usize) -> std::io::Result<RunSummary> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.clone());
    std::fs::create_dir_all(&dir)?;
    let dump = cfg.dump_images.then_some(dir.as_path());
    let all = jobs(cfg);
    let cases = cfg.points().len();
    let rows = run_pool(all, threads, |job| execute(cfg, &job, dump));
    write_rows(&dir.join("results.csv"), &rows)?;
    let manifest = Manifest {
        version: version_string(),
        csv_schema: CSV_SCHEMA_VERSION,
        columns: RESULT_COLUMNS.to_vec(),
        runtime_columns: RUNTIME_COLUMNS.to_vec(),
        threads,
        cases,
        rows: rows.len(),
        failures: rows.iter().filter(|r| !r.ok()).count(),
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(RunSummary { dir, rows })
}

/// CSV text with the runtime columns removed, for determinism comparisons.
pub fn without_runtime(csv_text: &str) -> Result<String, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let mut out = String::new();
    let mut drop: Vec<usize> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 {
            drop = rec.iter().enumerate().filter(|(_, c)| RUNTIME_COLUMNS.contains(c)).map(|(j, _)| j).collect();
        }
        let kept: Vec<&str> = rec.iter().enumerate().filter(|(j, _)| !drop.contains(j)).map(|(_, c)| c).collect();
        let _ = writeln!(out, "{}", kept.join("\u{1f}"));
    }
    Ok(out)
}

/// Per-case aggregate shown by `inspect`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaseSummary {
    pub experiment: String,
    pub kind: String,
    pub case: String,
    pub rows: usize,
    pub errors: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean of each entry of the `values` column over ok rows.
    pub values: Vec<(String, f64)>,
}

pub fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| format!("{}: {e}", path.display()))?.iter().map(String::from).collect();
    if header != RESULT_COLUMNS {
        return Err(format!("{}: header does not match results schema {CSV_SCHEMA_VERSION}", path.display()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: row {}: {e}", path.display(), i + 2))?;
        out.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(rows: &[BTreeMap<String, String>]) -> Vec<CaseSummary> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&BTreeMap<String, String>>> = BTreeMap::new();
    for r in rows {
        let key = (r["experiment"].clone(), r["kind"].clone(), r["case"].clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<_> = g.iter().filter(|r| r["status"] == "ok").collect();
            let col = |c: &str| ok.iter().filter_map(|r| r[c].parse::<f64>().ok()).collect::<Vec<_>>();
            let mut names: Vec<String> = Vec::new();
            let mut vals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &ok {
                for kv in r["values"].split(';').filter(|s| !s.is_empty()) {
                    if let Some((k, v)) = kv.split_once('=') {
                        if let Ok(x) = v.parse::<f64>() {
                            if !vals.contains_key(k) {
                                names.push(k.to_string());
                            }
                            vals.entry(k.to_string()).or_default().push(x);
                        }
                    }
                }
            }
            CaseSummary {
                experiment: key.0,
                kind: key.1,
                case: key.2,
                rows: g.len(),
                errors: g.len() - ok.len(),
                psnr: mean(&col("psnr")),
                ssim: mean(&col("ssim")),
                values: names.into_iter().map(|k| (k.clone(), mean(&vals[&k]).unwrap_or(f64::NAN))).collect(),
            }
        })
        .collect()
}

pub fn format_summary(s: &[CaseSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:<16} {:<28} {:>5} {:>6} {:>8} {:>7}  values", "experiment", "kind", "case", "rows", "errors", "psnr", "ssim");
    let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for c in s {
        let vals: Vec<String> = c.values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        let _ = writeln!(
            out,
            "{:<16} {:<16} {:<28} {:>5} {:>6} {:>8} {:>7}  {}",
            c.experiment,
            c.kind,
            c.case,
            c.rows,
            c.errors,
            f(c.psnr, 2),
            f(c.ssim, 3),
            vals.join(" ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runtime_column_is_dropped() {
        let a = "x,runtime_s,y\n1,0.5,2\n";
        let b = "x,runtime_s,y\n1,9.25,2\n";
        assert_eq!(without_runtime(a).unwrap(), without_runtime(b).unwrap());
        assert_ne!(without_runtime(a).unwrap(), without_runtime("x,runtime_s,y\n1,0.5,3\n").unwrap());
    }

    #[test]
    fn header_matches_row_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_rows(&p, &[]).unwrap();
        assert!(read_rows(&p).unwrap().is_empty());
        let cfg = ExperimentConfig::from_toml("kind = \"defense\"\nseeds = [1]\ndump_images = false\n").unwrap();
        let row = execute(&cfg, &jobs(&cfg)[0], None);
        assert!(row.ok(), "{}", row.error);
        write_rows(&p, &[row]).unwrap();
        let back = read_rows(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0]["values"], "passed=1;architecture_diffs=0;parameter_flags=0;lint_findings=1");
    }
}
