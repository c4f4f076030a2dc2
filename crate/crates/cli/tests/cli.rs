use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dualrefine");

/// Overrides that shrink the bench preset to a few seconds of work.
const TINY: &[&str] = &[
    "render.image_size=16",
    "render.samples_per_ray=16",
    "world.resolution=12",
    "coarse.resolution=12",
    "coarse.steps=3",
    "prior.corpus_per_class=4",
    "prior.train.steps=5",
    "dataset.views=4",
    "dataset.samples=2",
    "refine.total_steps=4",
    "refine.disc.resolution=16",
    "refine.disc.n_blocks=2",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--preset",
        "bench",
        "--threads",
        "1",
        "--out",
        out.to_str().unwrap(),
    ];
    for o in TINY {
        args.push("--set");
        args.push(o);
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn make_world(root: &Path) -> std::path::PathBuf {
    let w = root.join("world");
    ok(&run_tiny("make-world", &w, &[]));
    w
}

#[test]
fn help_exits_zero() {
    let o = run(&["refine", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("--dataset"));
}

#[test]
fn unknown_flag_exits_two_with_usage() {
    let o = run(&["refine", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn failed_run_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = run_tiny(
        "metrics",
        &out,
        &[
            "--field",
            "/nonexistent/a.field",
            "--ground-truth",
            "/nonexistent/b.field",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    // The lock is released even on failure.
    assert!(!out.join(".lock").exists());
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny("make-world", &dir.path().join("w"), &["--set", "refine.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "1").unwrap();
    let o = run_tiny("make-world", &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    assert!(!out.join("ground_truth.field").exists());
}

#[test]
fn gen_dataset_sixty_views_five_samples() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(dir.path());
    let ds = dir.path().join("ds");
    let gt = w.join("ground_truth.field");
    let s = ok(&run_tiny(
        "gen-dataset",
        &ds,
        &[
            "--ground-truth",
            gt.to_str().unwrap(),
            "--backend",
            "oracle",
            "--views",
            "60",
            "--samples",
            "5",
        ],
    ));
    assert!(s.contains("300 entries over 60 views"), "{s}");
    let manifest = fs::read_to_string(ds.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 301);
    assert!(ds.join("config.snapshot").exists());
}

#[test]
fn metrics_on_identical_fields_report_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(dir.path());
    let gt = w.join("ground_truth.field");
    let s = ok(&run_tiny(
        "metrics",
        &dir.path().join("m"),
        &["--field", gt.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap()],
    ));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["mean_psnr_to_gt"].as_f64(), Some(99.0));
    assert!(v["psnr_to_gt"]
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p.as_f64() == Some(99.0)));
}

#[test]
fn refine_is_reproducible_from_its_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(dir.path());
    let gt = w.join("ground_truth.field");
    let coarse = w.join("coarse.field");
    let ds = dir.path().join("ds");
    ok(&run_tiny(
        "gen-dataset",
        &ds,
        &["--ground-truth", gt.to_str().unwrap(), "--backend", "oracle"],
    ));
    let a = dir.path().join("a");
    ok(&run_tiny(
        "refine",
        &a,
        &[
            "--init",
            coarse.to_str().unwrap(),
            "--dataset",
            ds.to_str().unwrap(),
            "--mode",
            "GAN_ONLY",
            "--seed",
            "7",
        ],
    ));
    for f in ["config.snapshot", "state.ckpt", "losses.csv", "field.ckpt"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    // Same inputs, configuration taken only from the snapshot.
    let b = dir.path().join("b");
    let snap = a.join("config.snapshot");
    ok(&run(&[
        "refine",
        "--threads",
        "1",
        "--config",
        snap.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--init",
        coarse.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(a.join("state.ckpt")).unwrap(),
        fs::read(b.join("state.ckpt")).unwrap()
    );
}

#[test]
fn interrupted_refine_resumes_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(dir.path());
    let gt = w.join("ground_truth.field");
    let coarse = w.join("coarse.field");
    let ds = dir.path().join("ds");
    ok(&run_tiny(
        "gen-dataset",
        &ds,
        &["--ground-truth", gt.to_str().unwrap(), "--backend", "oracle"],
    ));
    let common = [
        "--init",
        coarse.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--mode",
        "L2_ONLY",
    ];
    let full = dir.path().join("full");
    ok(&run_tiny("refine", &full, &common));
    let part = dir.path().join("part");
    let s = ok(&run_tiny(
        "refine",
        &part,
        &[&common[..], &["--stop-after", "2"]].concat(),
    ));
    assert!(s.contains("step 2 of 4"), "{s}");
    ok(&run_tiny("refine", &part, &[&common[..], &["--resume"]].concat()));
    assert_eq!(
        fs::read(full.join("state.ckpt")).unwrap(),
        fs::read(part.join("state.ckpt")).unwrap()
    );
}

#[test]
fn ablate_prints_a_table_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let s = ok(&run_tiny(
        "ablate",
        &out,
        &["--modes", "L2_ONLY,SDS_L2,SDS_GAN", "--seeds", "3"],
    ));
    for id in ["L2_ONLY-seed0", "SDS_L2-seed1", "SDS_GAN-seed2"] {
        assert!(s.contains(id), "{s}");
    }
    let reports: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 9);
    assert!(reports
        .iter()
        .all(|r| r["mean_psnr_to_gt"].as_f64().unwrap().is_finite()));
}

#[test]
fn turntable_and_prior_commands_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let w = make_world(dir.path());
    let t = dir.path().join("t");
    let gt = w.join("ground_truth.field");
    ok(&run_tiny(
        "turntable",
        &t,
        &["--field", gt.to_str().unwrap(), "--views", "3"],
    ));
    let png = dualrefine::image::Image::load_png(t.join("turntable.png")).unwrap();
    assert_eq!((png.width, png.height), (48, 16));

    let p = dir.path().join("p");
    ok(&run_tiny("train-prior", &p, &[]));
    let prior = p.join("prior.ckpt");
    let c = dir.path().join("c");
    ok(&run_tiny("train-coarse", &c, &["--prior", prior.to_str().unwrap()]));
    assert!(c.join("field.ckpt").exists() && c.join("losses.csv").exists());
    let ds = dir.path().join("ds");
    let s = ok(&run_tiny(
        "gen-dataset",
        &ds,
        &[
            "--field",
            c.join("field.ckpt").to_str().unwrap(),
            "--backend",
            "toy_i2i",
            "--prior",
            prior.to_str().unwrap(),
        ],
    ));
    assert!(s.contains("8 entries"), "{s}");
}
