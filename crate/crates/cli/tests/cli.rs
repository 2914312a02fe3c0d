use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

use dsfeat::data::{
    generate_corpus, read_activation, read_keypoints, write_activation, CorpusConfig, DEFAULT_STATIC,
};
use dsfeat::network::ActivationMap;
use dsfeat::pipeline::{corpus_sequence, run_pipeline, PipelineConfig, Variant};

fn dsfeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsfeat"))
        .args(args)
        .output()
        .expect("spawn dsfeat")
}

fn ok(args: &[&str]) -> Output {
    let out = dsfeat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

const SMALL: [&str; 6] = ["--frames", "40", "--first-pass", "30", "--revisit-from", "5"];

fn small_corpus(dir: &Path) -> String {
    let out = p(dir, "seq");
    let mut args = vec!["gen-synth", "--out", &out];
    args.extend_from_slice(&SMALL);
    ok(&args);
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = dsfeat(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dsfeat(&["pr", "--bogus"]).status.code(), Some(1));
    assert_eq!(dsfeat(&[]).status.code(), Some(1));
    assert!(ok(&["--help"]).stdout.starts_with(b"Stability-map"));
}

#[test]
fn pr_on_fixture_reaches_full_area() {
    let tmp = TempDir::new().unwrap();
    let curve = p(tmp.path(), "curve.csv");
    let out = ok(&["pr", "--scores", &fixture("scores.csv"), "--gt", &fixture("loops.csv"), "--out", &curve]);
    let text = fs::read_to_string(&curve).unwrap();
    assert!(text.starts_with("threshold,precision,recall\n"));
    assert!(text.ends_with("auc=1.000000\n"), "{text}");
    assert_eq!(String::from_utf8_lossy(&out.stdout), "auc=1.000000\n");
    // The unverified row is never detected.
    assert_eq!(text.lines().count(), 1 + 6 + 1);
}

#[test]
fn data_errors_exit_2_on_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = dsfeat(&["heatmap", "--activation", &p(tmp.path(), "missing.dsfa"), "--out", &p(tmp.path(), "h.pgm")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("missing.dsfa"));

    let bad = p(tmp.path(), "bad.dsfa");
    fs::write(&bad, b"DSFX\0\0\0\0").unwrap();
    assert_eq!(dsfeat(&["heatmap", "--activation", &bad, "--out", &p(tmp.path(), "h.pgm")]).status.code(), Some(2));
}

#[test]
fn heatmap_scales_to_full_range() {
    let tmp = TempDir::new().unwrap();
    let a = p(tmp.path(), "a.dsfa");
    write_activation(Path::new(&a), &ActivationMap::new(1, 4, vec![0.0, 0.25, 0.5, 1.0]).unwrap()).unwrap();
    let pgm = p(tmp.path(), "a.pgm");
    ok(&["heatmap", "--activation", &a, "--out", &pgm]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5"));
    assert_eq!(&bytes[bytes.len() - 4..], &[0, 64, 128, 255]);
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let cfg = p(tmp.path(), "gen.cfg");
    let out = p(tmp.path(), "seq");
    fs::write(&cfg, format!("# small corpus\nout={out}\nframes=40\nfirst-pass=30\nrevisit-from=5\nseed=1\n")).unwrap();
    ok(&["gen-synth", "--config", &cfg, "--seed", "9"]);
    let meta = fs::read_to_string(tmp.path().join("seq/corpus.cfg")).unwrap();
    assert!(meta.contains("frames=40\n") && meta.contains("seed=9\n"), "{meta}");

    fs::write(&cfg, "frames=40\nno-such-flag=1\n").unwrap();
    let bad = dsfeat(&["gen-synth", "--config", &cfg, "--out", &out]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no-such-flag"));

    let missing = dsfeat(&["gen-synth", "--config", &p(tmp.path(), "none.cfg"), "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn traj_eval_reports_zero_for_identical_paths() {
    let tmp = TempDir::new().unwrap();
    let traj = p(tmp.path(), "t.txt");
    let mut s = String::new();
    for i in 0..30 {
        s.push_str(&format!("1 0 0 {i} 0 1 0 0 0 0 1 0\n"));
    }
    fs::write(&traj, s).unwrap();
    let out = ok(&["traj-eval", "--est", &traj, "--gt", &traj, "--step", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("frames=30\n"));
    assert!(text.contains("rotation_error_deg_per_m=0.000000000\n"), "{text}");
    assert!(text.contains("offset_deviation_percent=0.000000000\n"), "{text}");
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--base-channels", "2", "--per-param", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("mode=sparse") && text.contains("mode=dense"));
    assert_eq!(dsfeat(&["grad-check", "--mode", "diagonal"]).status.code(), Some(1));
}

#[test]
fn select_keeps_top_k() {
    let tmp = TempDir::new().unwrap();
    let seq = small_corpus(tmp.path());
    let frame = |ext: &str| format!("{seq}/frames/000003.{ext}");
    let (kp, desc) = (p(tmp.path(), "k.tsv"), p(tmp.path(), "d.desc"));
    ok(&[
        "select", "--keypoints", &frame("kp.tsv"), "--descriptors", &frame("desc"), "--width", "48", "--height", "32",
        "--k", "10", "--out-keypoints", &kp, "--out-descriptors", &desc,
    ]);
    let kept = read_keypoints(Path::new(&kp)).unwrap();
    assert_eq!(kept.len(), 10);
    assert!(kept.windows(2).all(|w| w[0].response >= w[1].response));
    ok(&[
        "select", "--keypoints", &frame("kp.tsv"), "--descriptors", &frame("desc"), "--method", "seman", "--labels",
        &frame("labels.pgm"), "--categories", &format!("{seq}/categories.tsv"), "--k", "10", "--out-keypoints", &kp,
        "--out-descriptors", &desc,
    ]);
    let needs_map = dsfeat(&[
        "select", "--keypoints", &frame("kp.tsv"), "--descriptors", &frame("desc"), "--method", "ours", "--width", "48",
        "--height", "32", "--out-keypoints", &kp, "--out-descriptors", &desc,
    ]);
    assert_eq!(needs_map.status.code(), Some(1));
}

fn hash(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn hash_tree(dir: &Path, out: &mut Vec<(PathBuf, String)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            hash_tree(&e, out);
        } else {
            out.push((e.clone(), hash(&e)));
        }
    }
}

/// Every stage of the scripted pipeline; returns the hash of each output.
fn scripted_run(root: &Path) -> Vec<(PathBuf, String)> {
    let seq = small_corpus(root);
    let w = p(root, "model.dsfw");
    ok(&[
        "train", "--corpus", &seq, "--out", &w, "--epochs", "2", "--base-channels", "2", "--top-k", "40", "--gap", "5",
        "--lr", "0.05", "--log", &p(root, "train.csv"),
    ]);
    let acts = p(root, "acts");
    ok(&["infer", "--weights", &w, "--corpus", &seq, "--out-dir", &acts]);
    ok(&["heatmap", "--activation", &format!("{acts}/000007.dsfa"), "--out", &p(root, "heat.pgm")]);
    let vocab = p(root, "vocab.dsfv");
    ok(&["build-vocab", "--corpus", &seq, "--k", "32", "--out", &vocab]);
    for m in ["trad", "seman", "ours"] {
        let cands = p(root, &format!("{m}.cands.csv"));
        let scores = p(root, &format!("{m}.scores.csv"));
        let common = ["--corpus", &seq, "--method", m, "--top-k", "60", "--activations", &acts];
        let mut r = vec!["retrieve", "--vocab", &vocab, "--gap", "5", "--out", &cands];
        r.extend_from_slice(&common);
        ok(&r);
        let mut v = vec!["verify", "--candidates", &cands, "--out", &scores];
        v.extend_from_slice(&common);
        ok(&v);
        ok(&["pr", "--scores", &scores, "--gt", &format!("{seq}/loops.csv"), "--out", &p(root, &format!("{m}.pr.csv"))]);
    }
    ok(&[
        "pipeline", "--corpus", &seq, "--activations", &acts, "--top-k", "60", "--vocab-k", "32", "--gap", "5", "--out",
        &p(root, "report.csv"), "--scores-dir", &p(root, "scores"),
    ]);
    let mut hashes = Vec::new();
    hash_tree(root, &mut hashes);
    hashes
        .into_iter()
        .map(|(path, h)| (path.strip_prefix(root).unwrap().to_path_buf(), h))
        .collect()
}

#[test]
fn scripted_pipeline_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = scripted_run(a.path());
    let second = scripted_run(b.path());
    assert!(first.len() > 40 * 6);
    assert_eq!(first, second);

    let root = a.path();
    let report = fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(report.starts_with("sequence,trad,seman,ours\nseq,"), "{report}");
    assert!(!report.contains("skipped"));
    // The stage-by-stage run scores candidates exactly as the pipeline does.
    for m in ["trad", "seman", "ours"] {
        assert_eq!(
            fs::read(root.join(format!("{m}.scores.csv"))).unwrap(),
            fs::read(root.join(format!("scores/seq.{m}.csv"))).unwrap(),
            "{m}"
        );
    }
    let log = fs::read_to_string(root.join("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(read_activation(&root.join("acts/000000.dsfa")).unwrap().width(), 48);
}

#[test]
fn pipeline_matches_library_on_generated_corpus() {
    let tmp = TempDir::new().unwrap();
    let seq = small_corpus(tmp.path());
    let report = p(tmp.path(), "report.csv");
    ok(&[
        "pipeline", "--corpus", &seq, "--variants", "trad,seman", "--top-k", "60", "--vocab-k", "32", "--gap", "5",
        "--out", &report,
    ]);
    let corpus = generate_corpus(&CorpusConfig {
        n_frames: 40,
        first_pass: 30,
        revisit_from: 5,
        ..CorpusConfig::default()
    })
    .unwrap();
    let lib = run_pipeline(
        &[corpus_sequence(&corpus, "seq", None, &DEFAULT_STATIC).unwrap()],
        &PipelineConfig {
            variants: vec![Variant::Trad, Variant::Seman],
            top_k: 60,
            vocab_k: 32,
            exclusion_gap: 5,
            ..PipelineConfig::default()
        },
    )
    .unwrap();
    assert_eq!(fs::read_to_string(&report).unwrap(), lib.to_csv());

    // Without weights or cached maps the learned variant is skipped.
    ok(&["pipeline", "--corpus", &seq, "--vocab-k", "32", "--out", &report]);
    assert!(fs::read_to_string(&report).unwrap().ends_with(",skipped\n"));
}

#[test]
fn train_resumes_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let seq = small_corpus(tmp.path());
    let common = ["--corpus", &seq, "--base-channels", "2", "--top-k", "40", "--gap", "5", "--lr", "0.05"];
    let straight = p(tmp.path(), "straight.dsfw");
    let mut a = vec!["train", "--epochs", "3", "--out", &straight];
    a.extend_from_slice(&common);
    ok(&a);
    let half = p(tmp.path(), "half.dsfw");
    let mut b = vec!["train", "--epochs", "2", "--out", &half];
    b.extend_from_slice(&common);
    ok(&b);
    let resumed = p(tmp.path(), "resumed.dsfw");
    let mut c = vec!["train", "--epochs", "3", "--resume", &half, "--out", &resumed];
    c.extend_from_slice(&common);
    ok(&c);
    assert_eq!(hash(Path::new(&straight)), hash(Path::new(&resumed)));
}
