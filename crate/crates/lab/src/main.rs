use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gia_core::attack::ana::{build_imprint, fishing_manipulate};
use gia_core::defense::{validate, ScanThresholds, ValidationReport};
use gia_core::fl::synth_dataset;
use gia_core::model::{build_model, zoo::Arch, ActivationKind, Init};
use gia_core::params_io::{load_model, save_model};
use gia_lab::config::ExperimentConfig;
use gia_lab::exit;
use gia_lab::harness::{format_summary, pool_size, read_rows, run_experiment, summarize};
use gia_lab::refspec::RefSpecFile;
use gia_lab::trends::{acceptance, bench_trends_with, BenchOptions, REFERENCE_SEEDS};

#[derive(Parser)]
#[command(name = "gia-lab", version, about = "Gradient inversion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArtifactArg {
    Clean,
    Imprint,
    Fishing,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the trend suite and print one verdict per criterion.
    Bench {
        /// Directory for bench.csv (and bench_repeat.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Criteria to run, e.g. `--only 2,3`; skips the determinism rerun.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<usize>>,
        /// Run the suite once and skip the determinism criterion.
        #[arg(long)]
        once: bool,
    },
    /// Summarize a results.csv per experiment and case.
    Inspect { results: PathBuf },
    /// Validate a received model file against a reference spec.
    Defend {
        params: PathBuf,
        refspec: PathBuf,
        /// Print the machine-readable CSV row instead of the text report.
        #[arg(long)]
        csv: bool,
    },
    /// Write a zoo model file, optionally carrying an attack artifact.
    BuildModel {
        out: PathBuf,
        #[arg(long, default_value = "cnn-s")]
        arch: String,
        #[arg(long, default_value = "relu")]
        activation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "clean")]
        artifact: ArtifactArg,
        #[arg(long, default_value_t = 128)]
        bins: usize,
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        target: usize,
    },
}

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn threads() -> Result<usize, String> {
    pool_size()
}

fn cmd_run(config: PathBuf, out: Option<PathBuf>) -> ExitCode {
    let cfg = match ExperimentConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let n = match threads() {
        Ok(n) => n,
        Err(e) => return fail(exit::CONFIG, e),
    };
    match run_experiment(&cfg, out.as_deref(), n) {
        Ok(s) => {
            let failures = s.failures();
            println!("{} rows written to {}", s.rows.len(), s.dir.join("results.csv").display());
            for r in s.rows.iter().filter(|r| !r.ok()) {
                eprintln!("case {} seed {} failed: {}", r.case, r.seed, r.error);
            }
            if failures > 0 {
                ExitCode::from(exit::CASE_FAILURES as u8)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(exit::CONFIG, format!("cannot write results: {e}")),
    }
}

fn cmd_bench(out: Option<PathBuf>, seeds: Option<Vec<u64>>, only: Option<Vec<usize>>, once: bool) -> ExitCode {
    let n = match threads() {
        Ok(n) => n,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let only = only.unwrap_or_default();
    if let Some(bad) = only.iter().find(|&&c| !(1..=12).contains(&c)) {
        return fail(exit::CONFIG, format!("--only takes criteria 1 to 12, got {bad}"));
    }
    let opts = BenchOptions { seeds: seeds.unwrap_or_else(|| REFERENCE_SEEDS.to_vec()), threads: n, only: only.clone() };
    if opts.seeds.is_empty() {
        return fail(exit::CONFIG, "--seeds must name at least one seed");
    }
    let print = |v: &gia_lab::trends::Verdict| println!("{}", v.line());
    let (first, second) = if once || !only.is_empty() {
        (bench_trends_with(&opts, print), None)
    } else {
        let (a, b) = acceptance(&opts, print);
        (a, Some(b))
    };
    if let Some(dir) = out {
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("bench.csv"), first.to_csv())?;
            if let Some(b) = &second {
                std::fs::write(dir.join("bench_repeat.csv"), b.to_csv())?;
            }
            std::fs::write(dir.join("verdicts.txt"), first.table())
        };
        if let Err(e) = write() {
            return fail(exit::CONFIG, format!("cannot write bench output: {e}"));
        }
    }
    let passed = first.verdicts.iter().filter(|v| v.passed).count();
    println!("{passed}/{} criteria passed", first.verdicts.len());
    if first.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(exit::ACCEPTANCE as u8)
    }
}

fn cmd_inspect(results: PathBuf) -> ExitCode {
    match read_rows(&results) {
        Ok(rows) => {
            print!("{}", format_summary(&summarize(&rows)));
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit::CONFIG, e),
    }
}

fn cmd_defend(params: PathBuf, refspec: PathBuf, csv: bool) -> ExitCode {
    let rf = match RefSpecFile::load(&refspec) {
        Ok(r) => r,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let reference = match rf.reference() {
        Ok(r) => r,
        Err(e) => return fail(exit::CONFIG, format!("{}: {e}", refspec.display())),
    };
    let (spec, p) = match load_model(&params) {
        Ok(x) => x,
        Err(e) => return fail(exit::CONFIG, format!("{}: {e}", params.display())),
    };
    let report = validate(&spec, &p, &reference, rf.client().as_ref(), &ScanThresholds::default());
    if csv {
        println!("{}", ValidationReport::CSV_HEADER);
        println!("{}", report.to_csv_row());
    } else {
        print!("{}", report.to_text());
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(exit::CASE_FAILURES as u8)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_build_model(
    out: PathBuf,
    arch: String,
    activation: String,
    seed: u64,
    artifact: ArtifactArg,
    bins: usize,
    beta: f64,
    target: usize,
) -> ExitCode {
    let build = || -> gia_core::Result<()> {
        let spec = Arch::parse(&arch)?.build([3, 8, 8], 10, ActivationKind::parse(&activation)?, 32);
        let params = build_model(&spec, Init::KaimingUniform, seed)?;
        let (spec, params) = match artifact {
            ArtifactArg::Clean => (spec, params),
            ArtifactArg::Imprint => {
                let data = synth_dataset(64, 3, 8, 8, 10, seed)?;
                let cal = synth_dataset(512, 3, 8, 8, 10, seed + 77)?;
                let (s, p, _) = build_imprint(&spec, &params, bins, &data.norm.normalize(&cal.images), seed)?;
                (s, p)
            }
            ArtifactArg::Fishing => (spec.clone(), fishing_manipulate(&spec, &params, target, beta)?.1),
        };
        save_model(&out, &spec, &params)
    };
    match build() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit::CONFIG, e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::Bench { out, seeds, only, once } => cmd_bench(out, seeds, only, once),
        Command::Inspect { results } => cmd_inspect(results),
        Command::Defend { params, refspec, csv } => cmd_defend(params, refspec, csv),
        Command::BuildModel { out, arch, activation, seed, artifact, bins, beta, target } => {
            cmd_build_model(out, arch, activation, seed, artifact, bins, beta, target)
        }
    }
}
