use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use embspace_core::io::{self, Dtype};
use embspace_core::synthetic::random_unit_vectors;
use embspace_core::Modality;
use serde_json::Value;

fn embspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embspace"))
        .args(args)
        .env("EMBSPACE_THREADS", "2")
        .output()
        .expect("spawn embspace")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

struct Synth {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Synth {
    fn new(extra: &[&str]) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        let mut args = vec!["synth", "--out", p(&data), "--classes", "6", "--per-class", "8", "--dim", "8", "--offset", "1.0"];
        args.extend_from_slice(extra);
        let out = embspace(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Synth { _tmp: tmp, root }
    }

    fn file(&self, name: &str) -> String {
        self.root.join("data").join(name).to_str().unwrap().to_string()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn synth_writes_all_outputs_and_prints_report() {
    let s = Synth::new(&[]);
    for f in ["images.emb", "texts.emb", "labels.csv", "s_inter.emb", "report.json"] {
        assert!(Path::new(&s.file(f)).is_file(), "missing {f}");
    }
    let r = report(&s.root.join("data"));
    assert_eq!(r["command"], "synth");
    assert_eq!(r["metrics"]["count"], 48.0);
    let images = io::load_embeddings(s.file("images.emb")).unwrap();
    assert_eq!((images.len(), images.dim()), (48, 8));
    assert!(images.is_normalized());
    let labels = io::load_labels(s.file("labels.csv")).unwrap();
    assert_eq!(labels.ids.len(), 48);
}

#[test]
fn stdout_report_matches_file() {
    let s = Synth::new(&[]);
    let out_dir = s.out("ret");
    let out = embspace(&["retrieval", "--images", &s.file("images.emb"), "--labels", &s.file("labels.csv"), "--out", p(&out_dir)]);
    assert!(out.status.success());
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, report(&out_dir));
    assert!(out_dir.join("label_map.csv").is_file());
}

#[test]
fn recover_both_routes_match_ground_truth() {
    let s = Synth::new(&[]);
    let (sinter, texts, images) = (s.file("s_inter.emb"), s.file("texts.emb"), s.file("images.emb"));
    for (method, extra) in [("anchor-free", ["--dim", "8"]), ("anchor", ["--texts", texts.as_str()])] {
        let out_dir = s.out(method);
        let mut args = vec!["recover", "--method", method, "--sinter", &sinter, "--images", &images, "--out", p(&out_dir)];
        args.extend_from_slice(&extra);
        let out = embspace(&args);
        assert!(out.status.success(), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let r = report(&out_dir);
        assert!(r["metrics"]["max_abs_error"].as_f64().unwrap() <= 1e-6, "{method}");
        let (_, s_intra) = io::load_matrix(out_dir.join("s_intra.emb")).unwrap();
        assert_eq!(s_intra.shape(), (48, 48));
    }
}

#[test]
fn explicit_anchors_are_echoed() {
    let s = Synth::new(&[]);
    let out_dir = s.out("rec");
    let out = embspace(&[
        "recover", "--method", "anchor", "--sinter", &s.file("s_inter.emb"), "--texts", &s.file("texts.emb"),
        "--anchors", "0,9,17,25,33,41,2,12", "--out", p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out_dir);
    assert_eq!(r["parameters"]["anchors"], serde_json::json!([0, 9, 17, 25, 33, 41, 2, 12]));
}

#[test]
fn project_round_trips_through_disk() {
    let s = Synth::new(&[]);
    let out_dir = s.out("proj");
    let out = embspace(&[
        "project", "--images", &s.file("images.emb"), "--texts", &s.file("texts.emb"), "--keep", "0.5", "--csv",
        "--dtype", "f64", "--out", p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let projected = io::load_embeddings(out_dir.join("projected.emb")).unwrap();
    assert_eq!((projected.len(), projected.dim()), (48, 8));
    let csv = std::fs::read_to_string(out_dir.join("projected.csv")).unwrap();
    assert_eq!(csv.lines().count(), 48 + 1);
    assert_eq!(report(&out_dir)["parameters"]["keep_count"], 4);
}

#[test]
fn indicators_write_histogram_csvs() {
    let s = Synth::new(&[]);
    let out_dir = s.out("ind");
    let out = embspace(&[
        "indicators", "--images", &s.file("images.emb"), "--labels", &s.file("labels.csv"), "--texts", &s.file("texts.emb"),
        "--bins", "20", "--out", p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["class_pairs.csv", "modality_pairs.csv"] {
        let text = std::fs::read_to_string(out_dir.join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "bin_left,bin_right,density_a,density_b");
        assert_eq!(text.lines().count(), 21);
    }
    let m = &report(&out_dir)["metrics"];
    let overlap = m["class.overlap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    assert!(m["modality_gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn fewshot_reports_per_seed_accuracy() {
    let s = Synth::new(&[]);
    let out_dir = s.out("few");
    let out = embspace(&[
        "fewshot", "--images", &s.file("images.emb"), "--labels", &s.file("labels.csv"), "--shots", "2", "--seeds", "3",
        "--out", p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = &report(&out_dir)["metrics"];
    for k in 0..3 {
        assert!(m[format!("accuracy.seed_{k}")].is_number());
    }
    assert!(m["accuracy.seed_3"].is_null());
    assert!((m["chance"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-15);
}

#[test]
fn rank_deficient_recovery_fails_without_outputs() {
    let s = Synth::new(&[]);
    let out_dir = s.out("bad");
    let out = embspace(&["recover", "--method", "anchor-free", "--sinter", &s.file("s_inter.emb"), "--dim", "12", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "RankDeficient");
    assert!(!out_dir.exists());
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let missing = tmp.path().join("nope.emb");
    let labels = tmp.path().join("labels.csv");
    std::fs::write(&labels, "index,label\n0,1\n").unwrap();
    let out = embspace(&["retrieval", "--images", p(&missing), "--labels", p(&labels), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists());
}

#[test]
fn unnormalized_flagged_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.emb");
    let header = r#"{"version":1,"count":1,"dim":2,"dtype":"f64le","modality":"image","normalized":true}"#;
    let mut bytes = format!("{header}\n").into_bytes();
    for v in [0.5f64, 0.5] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, bytes).unwrap();
    let labels = tmp.path().join("labels.csv");
    std::fs::write(&labels, "index,label\n0,1\n").unwrap();
    let out = embspace(&["retrieval", "--images", p(&path), "--labels", p(&labels), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "NotNormalized");
}

#[test]
fn label_count_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images.emb");
    io::save_embeddings(&images, &random_unit_vectors(4, 3, 1, Modality::Image).unwrap(), Dtype::F32le).unwrap();
    let labels = tmp.path().join("labels.csv");
    std::fs::write(&labels, "index,label\n0,1\n1,2\n").unwrap();
    let out_dir = tmp.path().join("o");
    let out = embspace(&["retrieval", "--images", p(&images), "--labels", p(&labels), "--out", p(&out_dir)]);
    assert!(!out.status.success());
    assert!(!out_dir.exists());
}

#[test]
fn usage_errors_exit_with_code_2() {
    let out = embspace(&["retrieval", "--images"]);
    assert_eq!(out.status.code(), Some(2));
    let out = embspace(&["recover", "--sinter", "x", "--method", "telepathy", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_shot_with_pca_back_is_rejected() {
    let s = Synth::new(&[]);
    let out_dir = s.out("zs");
    let out = embspace(&[
        "fewshot", "--images", &s.file("images.emb"), "--labels", &s.file("labels.csv"), "--classifier", "zero-shot",
        "--texts", &s.file("texts.emb"), "--method", "pca-back", "--out", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(6));
    assert!(!out_dir.exists());
}

#[test]
fn reruns_are_byte_identical() {
    let s = Synth::new(&["--seed", "5"]);
    let a = s.out("a");
    let b = s.out("b");
    for dir in [&a, &b] {
        let out = embspace(&[
            "indicators", "--images", &s.file("images.emb"), "--labels", &s.file("labels.csv"), "--max-pairs", "100",
            "--seed", "3", "--out", p(dir),
        ]);
        assert!(out.status.success());
    }
    for f in ["report.json", "class_pairs.csv", "label_map.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
