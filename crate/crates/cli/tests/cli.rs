use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perfinline::policy::PolicyParams;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perfinline"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("pipeline.toml");
    fs::write(&path, text).unwrap();
    path
}

fn gen_corpus(dir: &Path, name: &str, corpus_toml: &str) -> PathBuf {
    let cfg = write_config(dir, corpus_toml);
    let out = dir.join(name);
    let o = run(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const SMALL: &str = r#"
[corpus]
prefix = "s"
count = 4
first_seed = 100
min_callsites = 1
max_callsites = 6
[corpus.gen]
n_functions = 4
"#;

fn collected(dir: &Path) -> PathBuf {
    let corpus = gen_corpus(dir, "corpus", SMALL);
    let out = dir.join("collect");
    let o = run(&["collect", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("dataset.csv")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_corpus(dir.path(), "a", SMALL);
    let b = gen_corpus(dir.path(), "b", SMALL);
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 5);
    for n in names {
        let fa = fs::read(a.join(&n)).unwrap();
        let fb = fs::read(b.join(&n)).unwrap();
        if n != "manifest.json" {
            assert_eq!(fa, fb, "{n:?}");
        }
    }
    let ma = json(&a.join("manifest.json"));
    assert_eq!(ma["run_digest"], json(&b.join("manifest.json"))["run_digest"]);
    assert_eq!(ma["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn spec_file_with_five_seeds_gives_five_modules() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("corpus.toml");
    fs::write(&spec, "prefix = \"k\"\nseeds = [1, 2, 3, 5, 8]\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["gen", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in [1, 2, 3, 5, 8] {
        assert!(out.join(format!("k{s}.json")).is_file());
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6);
    fs::write(&spec, "").unwrap();
    let empty = dir.path().join("empty");
    assert_eq!(code(&run(&["gen", "--spec", p(&spec), "--out", p(&empty)])), 2);
    assert!(!empty.exists());
}

#[test]
fn empty_corpus_spec_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[corpus]\nprefix = \"x\"\n");
    let out = dir.path().join("out");
    let o = run(&["gen", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_invocations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["collect"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let cfg = write_config(dir.path(), "[collect]\niteration = 3\n");
    assert_eq!(code(&run(&["gen", "--config", p(&cfg)])), 2);
    let missing = dir.path().join("nope");
    assert_eq!(code(&run(&["collect", "--corpus", p(&missing), "--out", p(dir.path())])), 2);
}

#[test]
fn zero_callsite_corpus_labels_are_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(
        dir.path(),
        "flat",
        "[corpus]\nprefix = \"f\"\ncount = 3\n[corpus.gen]\ncallsite_density = 0.0\n",
    );
    let out = dir.path().join("collect");
    let o = run(&["collect", "--corpus", p(&corpus), "--out", p(&out), "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("dataset.csv")).unwrap();
    let samples = perfinline::dataset::read_dataset_csv(text.as_bytes()).unwrap();
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|s| s.label == 1.0 && s.meta.global_speedup == 1.0));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["contradictions"], 0);
}

#[test]
fn outputs_carry_the_manifest_digest() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = collected(dir.path());
    let text = fs::read_to_string(&dataset).unwrap();
    let manifest = json(&dataset.with_file_name("manifest.json"));
    let digest = manifest["run_digest"].as_str().unwrap();
    assert_eq!(text.lines().next().unwrap(), format!("# run_digest={digest}"));
    assert_eq!(json(&dataset.with_file_name("contradiction.json"))["run_digest"], digest);
    assert_eq!(manifest["subcommand"], "collect");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
}

#[test]
fn too_few_samples_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = collected(dir.path());
    let text = fs::read_to_string(&dataset).unwrap();
    let short: Vec<&str> = text.lines().take(5).collect();
    let small = dir.path().join("small.csv");
    fs::write(&small, short.join("\n") + "\n").unwrap();
    let out = dir.path().join("pre");
    let o = run(&["preprocess", "--dataset", p(&small), "--out", p(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn schema_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = collected(dir.path());
    let pre = dir.path().join("pre");
    let o = run(&["preprocess", "--dataset", p(&dataset), "--out", p(&pre)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let path = pre.join("preproc.json");
    let text = fs::read_to_string(&path).unwrap().replace("preproc/1", "preproc/0");
    fs::write(&path, text).unwrap();
    let o = run(&[
        "train-ir2perf",
        "--dataset",
        p(&dataset),
        "--preproc",
        p(&path),
        "--out",
        p(&dir.path().join("model")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

fn zero_policy(dir: &Path, training: &[&str]) -> PathBuf {
    let text = PolicyParams::zeros().to_json().unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["training_programs"] = serde_json::json!(training);
    let path = dir.join("policy.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn missing_policy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "test", SMALL);
    let o = run(&[
        "evaluate",
        "--corpus",
        p(&corpus),
        "--policy",
        p(&dir.path().join("absent.json")),
        "--out",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn overlap_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "test", SMALL);
    let eval = dir.path().join("eval");
    let policy = zero_policy(dir.path(), &[]);
    let o = run(&[
        "evaluate", "--corpus", p(&corpus), "--policy", p(&policy),
        "--train-corpus", p(&corpus), "--out", p(&eval),
    ]);
    assert_eq!(code(&o), 5);
    let policy = zero_policy(dir.path(), &["s101", "elsewhere"]);
    let o = run(&["evaluate", "--corpus", p(&corpus), "--policy", p(&policy), "--out", p(&eval)]);
    assert_eq!(code(&o), 5);
    assert!(!eval.join("report.json").exists());
}

#[test]
fn zero_policy_matches_never_inline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path(), "test", SMALL);
    let policy = zero_policy(dir.path(), &[]);
    let o = run(&[
        "evaluate", "--corpus", p(&corpus), "--policy", p(&policy),
        "--out", p(&dir.path().join("eval")), "--format", "json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["geomean"]["speedup_wrt_never-inline"], 1.0);
    assert_eq!(report["geomean"]["size_ratio_wrt_never-inline"], 1.0);
    for prog in report["programs"].as_array().unwrap() {
        let r = prog["results"].as_array().unwrap();
        let rt = |s: &str| r.iter().find(|x| x["strategy"] == s).unwrap()["runtime"].as_f64().unwrap();
        assert_eq!(rt("policy"), rt("never-inline"));
    }
}

#[test]
fn demo_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[policy]\niterations = 10\n[ir2perf]\nepochs = 3\n[demo.data]\nprefix = \"d\"\ncount = 9\nmin_callsites = 1\n",
    );
    let out = dir.path().join("demo");
    let o = run(&["demo", "--config", p(&cfg), "--out", p(&out), "--seed", "5", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("geomean"));
    for f in [
        "collect/dataset.csv",
        "collect/contradiction.json",
        "preprocess/preproc.json",
        "ir2perf/ir2perf.json",
        "ir2perf/loss_history.csv",
        "policy/policy.json",
        "policy/policy_history.csv",
        "evaluate/report.json",
        "evaluate/report.txt",
        "autotune/regions.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let policy = json(&out.join("policy/policy.json"));
    let ids = policy["training_programs"].as_array().unwrap();
    assert!(ids.iter().any(|v| v == "d0") || ids.iter().any(|v| v.as_str().unwrap().starts_with('d')));
    assert!(ids.iter().any(|v| v.as_str().unwrap().starts_with("train")));
    assert_eq!(json(&out.join("evaluate/manifest.json"))["seed"], 5);
}
