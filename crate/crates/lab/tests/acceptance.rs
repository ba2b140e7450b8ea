//! Runs every acceptance criterion at its pinned tolerance and prints one
//! PASS/FAIL line per criterion. The suite is run twice; the last criterion
//! compares the two runs.

use std::process::ExitCode;

use gia_lab::harness::pool_size;
use gia_lab::trends::{acceptance, BenchOptions};

fn main() -> ExitCode {
    let threads = match pool_size() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let opts = BenchOptions { threads, ..BenchOptions::default() };
    let (report, _) = acceptance(&opts, |v| println!("{}", v.line()));
    let passed = report.verdicts.iter().filter(|v| v.passed).count();
    println!("acceptance: {passed}/{} criteria passed", report.verdicts.len());
    if report.verdicts.len() == 13 && report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
