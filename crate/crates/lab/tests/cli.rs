use std::path::Path;
use std::process::{Command, Output};

use gia_lab::harness::without_runtime;

fn lab(args: &[&str], threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gia-lab"));
    c.args(args);
    match threads {
        Some(t) => c.env("GIA_LAB_THREADS", t),
        None => c.env_remove("GIA_LAB_THREADS"),
    };
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(dir: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join("results.csv")).unwrap();
    r.records().map(Result::unwrap).collect()
}

const CLOSED_FORM: &str = "kind = \"closed-form\"\nname = \"cf\"\nseeds = [1, 2]\n";

#[test]
fn run_writes_one_row_per_seed_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cf.toml", CLOSED_FORM);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = lab(&["run", &cfg, "--out", a.to_str().unwrap()], None);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = lab(&["run", &cfg, "--out", b.to_str().unwrap()], Some("1"));
    assert_eq!(code(&ob), 0);

    let rows = csv_rows(&a);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| &r[12] == "ok"));
    let ta = std::fs::read_to_string(a.join("results.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("results.csv")).unwrap();
    assert_eq!(without_runtime(&ta).unwrap(), without_runtime(&tb).unwrap());

    let manifest = std::fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("csv_schema = 1"));
    assert!(manifest.contains("kind = \"closed-form\""));
    let images: Vec<_> = std::fs::read_dir(a.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!images.is_empty());
    for p in images {
        assert_eq!(p.extension().unwrap(), "ppm");
        assert!(std::fs::read(&p).unwrap().starts_with(b"P6\n8 8\n255\n"));
    }
}

#[test]
fn failing_cases_leave_other_rows_intact() {
    let tmp = tempfile::tempdir().unwrap();
    // eight records: enough for the client pool, too few for the training draw
    let mut bytes = Vec::new();
    for i in 0..8u8 {
        bytes.push(i % 10);
        bytes.extend((0..3072).map(|p| ((p * 7 + i as usize) % 256) as u8));
    }
    let data = tmp.path().join("batch.bin");
    std::fs::write(&data, bytes).unwrap();
    let cfg = write(
        tmp.path(),
        "mixed.toml",
        &format!(
            "{CLOSED_FORM}dump_images = false\n[dataset]\nsource = \"cifar10\"\npath = {:?}\nsize = 4\nresolution = 32\n\
             [model]\narch = \"mlp2\"\ntrain_size = 16\n[sweep]\ntrained = [false, true]\n",
            data.to_str().unwrap()
        ),
    );
    let out = tmp.path().join("out");
    let o = lab(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 4);
    let ok: Vec<_> = rows.iter().filter(|r| &r[12] == "ok").collect();
    assert_eq!(ok.len(), 2);
    assert!(ok.iter().all(|r| &r[1] == "untrained" && &r[13] == "100"));
    assert!(rows.iter().filter(|r| &r[12] == "error").all(|r| &r[1] == "trained" && r[18].contains("out of range")));
    assert!(!out.join("images").exists());
}

#[test]
fn invalid_sweep_points_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "big.toml", &format!("{CLOSED_FORM}[sweep]\nbatch_size = [1, 100]\n"));
    let o = lab(&["run", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("attack.batch_size"));
}

#[test]
fn config_errors_exit_with_a_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "kind = \"op-gia\"\nseeds = [1]\nbogus = 3\n");
    let o = lab(&["run", &cfg], None);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    let cfg = write(tmp.path(), "axis.toml", "kind = \"lti\"\n[sweep]\nbatch_size = [1, 2]\n");
    let o = lab(&["run", &cfg], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep.batch_size"));

    let ok = write(tmp.path(), "ok.toml", CLOSED_FORM);
    assert_eq!(code(&lab(&["run", &ok], Some("zero"))), 1);
    assert_eq!(code(&lab(&["run"], None)), 1);
    assert_eq!(code(&lab(&["--help"], None)), 0);
}

#[test]
fn inspect_summarizes_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cf.toml", &format!("{CLOSED_FORM}dump_images = false\n"));
    let out = tmp.path().join("out");
    assert_eq!(code(&lab(&["run", &cfg, "--out", out.to_str().unwrap()], None)), 0);
    let o = lab(&["inspect", out.join("results.csv").to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("cf") && text.contains("default"), "{text}");
    let bogus = write(tmp.path(), "x.csv", "a,b\n1,2\n");
    assert_eq!(code(&lab(&["inspect", &bogus], None)), 1);
}

#[test]
fn defend_exit_codes_follow_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let refspec = write(tmp.path(), "ref.toml", "arch = \"cnn-s\"\nactivation = \"relu\"\n[client]\nbatch_size = 16\nepochs = 2\n");
    for (artifact, want) in [("clean", 0), ("imprint", 2), ("fishing", 2)] {
        let model = p(&format!("{artifact}.bin"));
        assert_eq!(code(&lab(&["build-model", &model, "--artifact", artifact, "--seed", "3"], None)), 0);
        let o = lab(&["defend", &model, &refspec], None);
        assert_eq!(code(&o), want, "{artifact}: {}", String::from_utf8_lossy(&o.stdout));
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.starts_with(if want == 0 { "verdict: pass" } else { "verdict: fail" }));
    }
    let o = lab(&["defend", &p("fishing.bin"), &refspec, "--csv"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().nth(1).unwrap().starts_with("fail,pass,0,"), "{text}");

    let sig = p("sigmoid.bin");
    assert_eq!(code(&lab(&["build-model", &sig, "--activation", "sigmoid"], None)), 0);
    assert_eq!(code(&lab(&["defend", &sig, &refspec], None)), 2);

    assert_eq!(code(&lab(&["defend", &p("missing.bin"), &refspec], None)), 1);
    let garbage = write(tmp.path(), "garbage.bin", "not a model");
    assert_eq!(code(&lab(&["defend", &garbage, &refspec], None)), 1);
    let badref = write(tmp.path(), "bad.toml", "arch = \"cnn-s\"\n");
    assert_eq!(code(&lab(&["defend", &p("clean.bin"), &badref], None)), 1);
}

#[test]
fn bench_subset_prints_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let o = lab(&["bench", "--only", "2,4", "--seeds", "11", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("C2  PASS")));
    assert!(text.lines().any(|l| l.starts_with("C4  PASS")));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("criterion,seed,quantity,value,runtime_s\n"));
    assert_eq!(code(&lab(&["bench", "--only", "13"], None)), 1);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.file_name().unwrap() == "ref.toml" {
            gia_lab::refspec::RefSpecFile::load(&p).unwrap().reference().unwrap();
        } else {
            gia_lab::config::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{e}"));
        }
        n += 1;
    }
    assert!(n >= 4);
}
