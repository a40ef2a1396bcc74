use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cacenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cacenet"))
        .current_dir(dir)
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cacenet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "model.preset=tiny",
    "--set",
    "synth.height=16",
    "--set",
    "synth.width=16",
    "--set",
    "train.batch_size=2",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn synth_count_and_seed_gives_even_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "synth",
            "--count",
            "20",
            "--seed",
            "7",
            "--set",
            "synth.height=16",
            "--set",
            "synth.width=16",
        ],
    );
    assert!(out.contains("10 train, 10 test"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 21);
    assert_eq!(manifest.matches(",train").count(), 10);
    assert_eq!(manifest.matches(",test").count(), 10);
    assert_eq!(fs::read_dir(dir.path().join("data/images")).unwrap().count(), 20);
}

#[test]
fn synth_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth",
        "--count",
        "4",
        "--seed",
        "3",
        "--set",
        "synth.height=16",
        "--set",
        "synth.width=16",
    ];
    ok(dir.path(), &with(&args, &["--data", "a"]));
    ok(dir.path(), &with(&args, &["--data", "b"]));
    for sub in [
        "manifest.csv",
        "images/0002.pgm",
        "masks/0002.pgm",
        "boundaries/0002.csv",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(sub)).unwrap(),
            fs::read(dir.path().join("b").join(sub)).unwrap(),
            "{sub}"
        );
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad = cacenet(d, &["synth", "--set", "synth.noise=-1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("synth.noise"));

    let unknown = cacenet(d, &["synth", "--set", "synth.colour=3"]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = cacenet(d, &["train", "--data", "nowhere"]);
    assert_eq!(missing.status.code(), Some(3));

    fs::create_dir(d.join("full")).unwrap();
    fs::write(d.join("full/x"), "x").unwrap();
    assert_eq!(cacenet(d, &["synth", "--data", "full"]).status.code(), Some(3));

    ok(d, &with(&["synth", "--count", "4"], &TINY));
    let diverge = cacenet(
        d,
        &with(&["train", "--max-iter", "3", "--set", "train.lr=1e300"], &TINY),
    );
    assert_eq!(diverge.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("non-finite loss"));

    fs::write(d.join("junk.pgm"), "P5\n2 2\n255\n").unwrap();
    ok(d, &with(&["train", "--max-iter", "1"], &TINY));
    assert_eq!(cacenet(d, &["predict", "--image", "junk.pgm"]).status.code(), Some(3));
}

#[test]
fn train_eval_predict_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--count", "6"], &TINY));
    ok(
        d,
        &with(
            &["train", "--max-iter", "4", "--set", "train.checkpoint_every=2"],
            &TINY,
        ),
    );
    for f in [
        "model.ckpt",
        "loss.csv",
        "resolved_train.cfg",
        "checkpoints/iter_000002.ckpt",
        "checkpoints/iter_000004.ckpt",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let table = ok(d, &["eval"]);
    assert!(table.contains("CACE-Net"), "{table}");
    for f in [
        "eval_summary.csv",
        "eval_table.txt",
        "eval_cace_net_per_image.csv",
        "resolved_eval.cfg",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let manifest = fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    let id = manifest
        .lines()
        .find(|l| l.ends_with(",test"))
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let image = format!("data/images/{id}.pgm");
    let gt = format!("data/boundaries/{id}.csv");
    let out = ok(d, &["predict", "--image", &image, "--ground-truth", &gt]);
    assert!(out.contains("mae "), "{out}");
    for suffix in ["mask.pgm", "boundary.csv", "overlay.ppm"] {
        assert!(d.join("run").join(format!("{id}_{suffix}")).exists(), "{suffix}");
    }
    assert!(fs::read(d.join(format!("run/{id}_overlay.ppm")))
        .unwrap()
        .starts_with(b"P6"));
}

#[test]
fn ablation_reports_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--count", "4"], &TINY));
    ok(d, &with(&["train", "--max-iter", "2", "--out", "on"], &TINY));
    ok(
        d,
        &with(
            &["train", "--max-iter", "2", "--out", "off", "--attention", "off"],
            &TINY,
        ),
    );
    let resolved = fs::read_to_string(d.join("off/resolved_train.cfg")).unwrap();
    assert!(resolved.contains("model.attention=off  # flag"), "{resolved}");

    let table = ok(
        d,
        &[
            "eval",
            "--out",
            "cmp",
            "--checkpoint",
            "on/model.ckpt",
            "--checkpoint",
            "off/model.ckpt",
        ],
    );
    assert!(table.contains("CACE-Net") && table.contains("CE-Net"), "{table}");
    let summary = fs::read_to_string(d.join("cmp/eval_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");

    let mismatch = cacenet(
        d,
        &[
            "eval",
            "--out",
            "cmp",
            "--checkpoint",
            "off/model.ckpt",
            "--attention",
            "on",
            "--set",
            "model.preset=tiny",
        ],
    );
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("model.attention"));
}

#[test]
fn fixed_seed_runs_give_identical_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--count", "4", "--seed", "5"], &TINY));
    ok(
        d,
        &with(&["train", "--max-iter", "3", "--seed", "5", "--out", "a"], &TINY),
    );
    ok(
        d,
        &with(&["train", "--max-iter", "3", "--seed", "5", "--out", "b"], &TINY),
    );
    ok(
        d,
        &with(&["train", "--max-iter", "3", "--seed", "6", "--out", "c"], &TINY),
    );
    let a = fs::read(d.join("a/loss.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/loss.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c/loss.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("a/model.ckpt")).unwrap(),
        fs::read(d.join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn resolved_config_alone_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with(&["synth", "--count", "4", "--seed", "9"], &TINY));
    ok(
        d,
        &with(
            &["train", "--max-iter", "3", "--seed", "9", "--set", "train.lr=0.05"],
            &TINY,
        ),
    );
    let resolved = d.join("run/resolved_train.cfg");
    ok(d, &["train", "--config", resolved.to_str().unwrap(), "--out", "again"]);
    assert_eq!(
        fs::read(d.join("run/loss.csv")).unwrap(),
        fs::read(d.join("again/loss.csv")).unwrap()
    );
    let again = fs::read_to_string(d.join("again/resolved_train.cfg")).unwrap();
    assert!(again.contains("train.lr=0.05  # file"), "{again}");
    assert!(again.contains("paths.out=again  # flag"), "{again}");
}

#[test]
fn gradcheck_default_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(dir.path(), &["gradcheck"]);
    assert!(table.contains("conv2d") && table.contains("bce_loss"), "{table}");
    assert!(!table.contains("FAIL"), "{table}");
}
