use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wbc_core::data::{
    cell_centroid, read_image, DatasetManifest, FoldAssignment, DOMINANT_SUBJECT_SHARE,
};
use wbc_core::train::{f1_score, MetricsReport};

fn wbc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wbc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = wbc(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Every file under `root`, relative path to bytes.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SYNTH: &[&str] = &[
    "synth",
    "--subjects",
    "4",
    "--cells",
    "6",
    "--size",
    "32",
    "--test-subjects",
    "1",
];

fn synth(dir: &Path, out: &str) {
    let mut args = SYNTH.to_vec();
    args.extend(["--out", out]);
    ok(dir, &args);
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "a");
    synth(t.path(), "b");
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert_eq!(a.len(), 8 * 6 + 2);
    assert_eq!(a, b);
    let mut args = SYNTH.to_vec();
    args.extend(["--out", "c", "--seed", "8"]);
    ok(t.path(), &args);
    assert_ne!(a, tree(&t.path().join("c")));
    let echo = std::fs::read_to_string(t.path().join("a/config.toml")).unwrap();
    assert!(echo.contains("seed = 7"), "{echo}");
    assert!(echo.contains("cells_per_subject = 6"), "{echo}");
}

#[test]
fn split_satisfies_fold_invariants() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d");
    ok(
        t.path(),
        &[
            "split",
            "--manifest",
            "d/manifest.csv",
            "--folds",
            "3",
            "--seed",
            "1",
            "--out",
            "s",
        ],
    );
    let m = DatasetManifest::load(&t.path().join("d/manifest.csv")).unwrap();
    let f = FoldAssignment::load(&t.path().join("s/folds.csv")).unwrap();
    assert_eq!(f.k, 3);
    let report = f.check(&m).unwrap();
    assert!(report.max_gap <= 0.05);
    // every training subject in exactly one fold, no test subject in any
    for r in &m.records {
        assert_eq!(
            f.fold_of(&r.subject_id).is_some(),
            !r.is_test,
            "{}",
            r.subject_id
        );
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for fold in 0..f.k {
        for r in f.fold_records(&m, fold) {
            assert_eq!(*seen.entry(&r.subject_id).or_insert(fold), fold);
        }
    }
    assert!(DOMINANT_SUBJECT_SHARE > 0.0);
}

#[test]
fn train_then_eval_is_self_consistent() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d");
    ok(
        t.path(),
        &[
            "split",
            "--manifest",
            "d/manifest.csv",
            "--folds",
            "3",
            "--out",
            "s",
        ],
    );
    let common = [
        "--manifest",
        "d/manifest.csv",
        "--folds",
        "s/folds.csv",
        "--input-size",
        "32",
    ];
    let quick = ["--epochs", "1", "--batch-size", "4"];
    let mut a = vec!["train", "--stage", "s1", "--out", "a"];
    a.extend(common);
    a.extend(quick);
    ok(t.path(), &a);
    let mut b = vec!["train", "--stage", "s2c", "--out", "b"];
    b.extend(common);
    b.extend(quick);
    ok(t.path(), &b);
    let log = std::fs::read_to_string(t.path().join("a/metrics_log.csv")).unwrap();
    assert!(
        log.starts_with("epoch,split,acc,f1_n,f1_c,loss\n1,train,"),
        "{log}"
    );

    let mut h = vec![
        "train-hybrid",
        "--ckpt-a",
        "a/best.ckpt",
        "--ckpt-b",
        "b/best.ckpt",
        "--out",
        "h",
    ];
    h.extend(&common[..4]);
    h.extend(quick);
    ok(t.path(), &h);
    let audit = std::fs::read_to_string(t.path().join("h/freeze_audit.toml")).unwrap();
    assert!(audit.contains("components_unchanged = true"), "{audit}");

    ok(
        t.path(),
        &[
            "eval",
            "--stage",
            "s3c",
            "--ckpt",
            "h/best.ckpt",
            "--manifest",
            "d/manifest.csv",
            "--split",
            "test",
            "--out",
            "e",
        ],
    );
    let r = MetricsReport::load(&t.path().join("e/metrics.toml")).unwrap();
    let c = r.confusion;
    assert_eq!(c.total(), 2 * 6);
    assert_eq!(r.total, c.total());
    assert_eq!(r.accuracy, (c.tp + c.tn) as f64 / c.total() as f64);
    assert!((r.f1_cancer - f1_score(c.tp, c.fp, c.fn_).value).abs() < 1e-12);
    assert!((r.f1_normal - f1_score(c.tn, c.fn_, c.fp).value).abs() < 1e-12);

    // the wrong stage is refused
    let o = wbc(
        t.path(),
        &[
            "eval",
            "--stage",
            "s1",
            "--ckpt",
            "h/best.ckpt",
            "--manifest",
            "d/manifest.csv",
            "--out",
            "e2",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    // mismatched components are a config error
    let mut bad = vec![
        "train-hybrid",
        "--stage",
        "s3",
        "--ckpt-a",
        "a/best.ckpt",
        "--ckpt-b",
        "b/best.ckpt",
        "--out",
        "x",
    ];
    bad.extend(&common[..4]);
    bad.extend(quick);
    assert_eq!(wbc(t.path(), &bad).status.code(), Some(2));
}

#[test]
fn config_file_sets_values_and_flags_override() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("run.toml"),
        "seed = 11\n[synth]\nsubjects_per_class = 2\ncells_per_subject = 3\nsize = 32\n",
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "synth", "--config", "run.toml", "--cells", "2", "--out", "d",
        ],
    );
    let m = DatasetManifest::load(&t.path().join("d/manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 2 * 2 * 2);
    let echo = std::fs::read_to_string(t.path().join("d/config.toml")).unwrap();
    assert!(echo.contains("seed = 11"), "{echo}");

    std::fs::write(t.path().join("bad.toml"), "[synth]\nsubject = 2\n").unwrap();
    let o = wbc(t.path(), &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_centres_without_touching_inputs() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d");
    let before = tree(&t.path().join("d"));
    ok(
        t.path(),
        &[
            "preprocess",
            "--manifest",
            "d/manifest.csv",
            "--size",
            "48",
            "--out",
            "p",
        ],
    );
    assert_eq!(before, tree(&t.path().join("d")));
    let m = DatasetManifest::load(&t.path().join("p/manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 48);
    let img = read_image(&m.resolve(&m.records[0])).unwrap();
    assert_eq!(img.shape(), [3, 48, 48]);
    let (cy, cx) = cell_centroid(&img, None).unwrap();
    assert!(
        (cy - 23.5).abs() <= 0.5 && (cx - 23.5).abs() <= 0.5,
        "({cy}, {cx})"
    );
}

#[test]
fn inspect_dct_writes_planes() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d");
    ok(
        t.path(),
        &[
            "inspect-dct",
            "--image",
            "d/images/C00/000.png",
            "--out",
            "i",
        ],
    );
    for c in 0..3 {
        assert!(t.path().join(format!("i/od_{c}.png")).exists());
        assert!(t.path().join(format!("i/dct_{c}.png")).exists());
    }
    let summary = std::fs::read_to_string(t.path().join("i/dct_summary.toml")).unwrap();
    assert!(summary.contains("total = 1024"), "{summary}");
}

#[test]
fn errors_are_single_lines_with_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "d");
    ok(
        t.path(),
        &[
            "split",
            "--manifest",
            "d/manifest.csv",
            "--folds",
            "3",
            "--out",
            "s",
        ],
    );
    let cases: [(&[&str], i32); 5] = [
        (
            &[
                "train",
                "--manifest",
                "d/manifest.csv",
                "--folds",
                "s/folds.csv",
                "--stage",
                "s9",
            ],
            2,
        ),
        (
            &[
                "train",
                "--manifest",
                "d/manifest.csv",
                "--folds",
                "s/folds.csv",
                "--batch-size",
                "1",
            ],
            2,
        ),
        (
            &[
                "train",
                "--manifest",
                "missing.csv",
                "--folds",
                "s/folds.csv",
            ],
            3,
        ),
        (
            &[
                "train",
                "--manifest",
                "d/manifest.csv",
                "--folds",
                "s/folds.csv",
                "--input-size",
                "32",
                "--batch-size",
                "4",
                "--lr",
                "1e300",
            ],
            4,
        ),
        (&["synth", "--no-such-flag"], 2),
    ];
    for (args, code) in cases {
        let o = wbc(t.path(), args);
        assert_eq!(o.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        if code != 2 || args.contains(&"--stage") || args.contains(&"--batch-size") {
            let last = err.lines().last().unwrap();
            assert!(last.starts_with("error["), "{err}");
            assert_eq!(err.lines().filter(|l| l.starts_with("error")).count(), 1);
        }
    }
}
