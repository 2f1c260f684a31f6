use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mia_bench::data::{read_score_file, save_logits_file, LogitsRecord, Membership};
use mia_bench::numerics::{softmax, LogitVector};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mia-bench"));
    c.env_remove("MIA_BENCH_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_logits(dir: &Path) -> PathBuf {
    let records: Vec<LogitsRecord> = (0..12)
        .map(|i| LogitsRecord {
            sample_id: format!("q{i}"),
            membership: if i % 2 == 0 { Membership::Member } else { Membership::Nonmember },
            true_label: i % 3,
            logits: LogitVector::new(vec![i as f64 * 0.5, 1.0, -(i as f64) * 0.25]).unwrap(),
        })
        .collect();
    let path = dir.join("logits.csv");
    save_logits_file(&path, 3, &records).unwrap();
    path
}

#[test]
fn help_exits_zero_everywhere_and_documents_schemas() {
    assert_eq!(code(&run(&["--help"])), 0);
    for sub in ["gen-data", "run", "defend", "attack", "midput", "sweep", "bench"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(stdout(&out).contains("--output") || sub == "midput", "{sub}");
    }
    assert!(stdout(&run(&["defend", "--help"])).contains("sample_id,membership,true_label"));
    assert!(stdout(&run(&["run", "--help"])).contains("dynanoise {base_variance"));
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["defend", "-i", "x", "-o", "y", "--defense", "Nope"])), 2);
    assert_eq!(code(&run(&["sweep", "--param", "gamma", "--values", "1", "-o", "x"])), 2);
    assert_eq!(code(&run(&["--threads", "0", "bench", "-o", "/tmp/never"])), 2);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dynanoise": {"base_variance": 0.5, "lambda_scale": 4, "temprature": 2}}"#).unwrap();
    let out = run(&["run", "-c", p(&cfg), "-o", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dynanoise") && err.contains("temprature"), "{err}");

    fs::write(&cfg, r#"{"dynanoise": {"base_variance": -1, "lambda_scale": 4, "temperature": 2}}"#).unwrap();
    assert_eq!(code(&run(&["run", "-c", p(&cfg), "-o", p(&dir.path().join("o"))])), 2);

    let out = run(&["sweep", "--param", "temperature", "--values", "2,1", "-o", p(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&run(&["defend", "-i", p(&missing), "-o", p(&dir.path().join("o.csv"))])), 1);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "sample_id,membership,true_label,logit_0,logit_1\na,member,0,1.0\n").unwrap();
    let out = run(&["defend", "-i", p(&bad), "-o", p(&dir.path().join("o.csv"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(&bad, "").unwrap();
    assert_eq!(code(&run(&["attack", "-i", p(&bad), "-o", p(dir.path())])), 1);
}

#[test]
fn gen_data_is_idempotent_and_feeds_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["gen-data", "--classes", "3", "--per-class", "40", "--dim", "5", "--spread", "1.0", "--seed", "42"];
    for out in [&a, &b] {
        let mut full = args.to_vec();
        full.extend(["-o", p(out)]);
        assert_eq!(code(&run(&full)), 0);
    }
    for f in ["dataset.csv", "split.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let out = dir.path().join("run");
    let res = run(&["run", "--data", p(&a), "--conditions", "None,DynaNoise", "-o", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = fs::read_to_string(out.join("eval_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn run_restricts_conditions_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["run", "--conditions", "None,DynaNoise", "--seed", "3", "-o", p(&out)])), 0);
    for f in ["eval_report.csv", "midput_report.csv", "run_manifest.json", "target_logits.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let eval = fs::read_to_string(out.join("eval_report.csv")).unwrap();
    let names: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["None", "DynaNoise"]);
    let midput = fs::read_to_string(out.join("midput_report.csv")).unwrap();
    assert_eq!(midput.lines().count(), 2);
    let manifest = fs::read_to_string(out.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
}

#[test]
fn defend_identity_preserves_rows_and_matches_softmax() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_logits(dir.path());
    let out = dir.path().join("p.csv");
    let args = [
        "defend", "-i", p(&input), "--base-variance", "0", "--temperature", "1", "--seed", "5", "-o", p(&out),
    ];
    assert_eq!(code(&run(&args)), 0);
    let file = read_score_file(&out).unwrap();
    assert!(file.metadata[0].starts_with("defense=DynaNoise"));
    let (_, probs) = file.into_probs().unwrap();
    let (_, logits) = read_score_file(&input).unwrap().into_logits().unwrap();
    assert_eq!(probs.len(), logits.len());
    for (q, z) in probs.iter().zip(&logits) {
        assert_eq!(q.sample_id, z.sample_id);
        let want = softmax(&z.logits, 1.0).unwrap();
        for (a, b) in q.probs.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn defend_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_logits(dir.path());
    let mut outputs = Vec::new();
    for (name, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        let out = dir.path().join(name);
        assert_eq!(code(&run(&["defend", "-i", p(&input), "--seed", seed, "-o", p(&out)])), 0);
        outputs.push(fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn defend_rejects_selena() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_logits(dir.path());
    let out = run(&["defend", "-i", p(&input), "--defense", "SELENA", "-o", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn attack_on_defended_file_writes_asr() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_logits(dir.path());
    let defended = dir.path().join("d.csv");
    assert_eq!(code(&run(&["defend", "-i", p(&input), "-o", p(&defended)])), 0);
    let out = dir.path().join("att");
    assert_eq!(code(&run(&["attack", "-i", p(&defended), "-o", p(&out)])), 0);
    let asr = fs::read_to_string(out.join("asr.csv")).unwrap();
    assert!(asr.starts_with("attack,asr,correct,total\n"));
    assert_eq!(asr.lines().count(), 3);
    let decisions = fs::read_to_string(out.join("decisions.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 1 + 2 * 12);
}

#[test]
fn midput_prints_published_cifar_row() {
    let dir = tempfile::tempdir().unwrap();
    let none = dir.path().join("none.csv");
    let dyna = dir.path().join("dyna.csv");
    fs::write(&none, "defense,model,confidence,loss,shadow\nNone,0.8211,0.6956,0.7639,0.7841\n").unwrap();
    fs::write(&dyna, "defense,model,confidence,loss,shadow\nDynaNoise,0.8156,0.2785,0.4221,0.5334\n").unwrap();
    let out = run(&["midput", "--baseline", p(&none), "--defended", p(&dyna)]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let row = text.lines().nth(1).unwrap();
    let overall: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((overall - 0.3310).abs() <= 5e-4, "{text}");

    let missing_base = run(&["midput", "--baseline", p(&dyna), "--defended", p(&dyna)]);
    assert_eq!(code(&missing_base), 1);
}

#[test]
fn sweep_and_bench_write_one_csv_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let res = run(&[
        "sweep", "--param", "temperature", "--values", "1,2,4,8", "--conditions", "None,DynaNoise", "-o", p(&out),
    ]);
    assert_eq!(code(&res), 0);
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, ["sweep_temperature.csv"]);
    let text = fs::read_to_string(out.join("sweep_temperature.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 2 * 4);

    let out = dir.path().join("b");
    assert_eq!(code(&run(&["bench", "--k", "4,40", "--samples", "50", "-o", p(&out)])), 0);
    let text = fs::read_to_string(out.join("overhead.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(code(&run(&["bench", "--k", "40,4", "-o", p(&out)])), 2);
}

#[test]
fn thread_count_from_env_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let status = bin()
            .env("MIA_BENCH_THREADS", threads)
            .args(["run", "--conditions", "None,StaticNoise,DynaNoise", "-o", p(&out)])
            .output()
            .unwrap();
        assert!(status.status.success());
        reports.push(fs::read(out.join("eval_report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn in_process_entry_point_returns_exit_codes() {
    assert_eq!(mia_bench::cli::run(["mia-bench", "--version"]), 0);
    assert_eq!(mia_bench::cli::run(["mia-bench", "bench", "--samples", "0", "-o", "/tmp/x"]), 2);
}
