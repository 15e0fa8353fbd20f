//! Runs the `polypseg` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use polypseg::data::synthetic;

fn polypseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polypseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn classify_masks_prints_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    synthetic::write_dataset(dir.path(), &synthetic::four_categories(48)).unwrap();
    let out = stdout(&polypseg(&["classify-masks", "--root", p(dir.path())]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "id,component_count,area_fraction,count_class,size_class"
    );
    assert_eq!(lines.len(), 5);
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), 5, "{row}");
    }
    let classes: std::collections::HashSet<_> = lines[1..]
        .iter()
        .map(|r| r.split(',').skip(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(classes.len(), 4);
}

#[test]
fn augment_preview_writes_three_files_per_view() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    stdout(&polypseg(&[
        "augment-preview",
        "--preset",
        "base_blur_bc",
        "--n",
        "3",
        "--size",
        "32",
        "--out",
        p(&out),
    ]));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    assert_eq!(names[0], "000_anchor.png");
    assert_eq!(names[8], "002_positive.png");
}

#[test]
fn train_then_eval_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "name = cli\nbackbone = tiny\ninput_size = 32\nepochs = 2\nk = 2\n\
             augment_preset = none\ncheckpoint_every = 1\noutput_dir = {}\n",
            dir.path().join("runs").display()
        ),
    )
    .unwrap();
    let out = stdout(&polypseg(&["train", "--config", p(&cfg)]));
    assert!(out.contains("2 epochs done, 2 steps logged"), "{out}");
    assert!(out.contains("synthetic: dice"), "{out}");

    let data = dir.path().join("data");
    let manifest = synthetic::write_dataset(&data, &synthetic::four_categories(32)).unwrap();
    let manifest_path = dir.path().join("test.txt");
    manifest.write(&manifest_path).unwrap();
    let ckpt = dir.path().join("runs/cli/checkpoints/epoch_0002.ckpt");
    let metrics = dir.path().join("metrics");
    let out = stdout(&polypseg(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest_path),
        "--out",
        p(&metrics),
    ]));
    assert!(out.contains("4 images"), "{out}");
    let csv = std::fs::read_to_string(metrics.join(format!("{}.csv", manifest.name))).unwrap();
    // header, four images, mean
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn gradcheck_at_small_size() {
    let out = stdout(&polypseg(&["gradcheck", "--size", "32", "--samples", "1"]));
    let rel: f64 = out
        .split("max relative error ")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(rel < 1e-3, "{out}");
}

#[test]
fn bad_configs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "backbone = tiny\nlearning_rate = 3\n").unwrap();
    let o = polypseg(&["train", "--config", p(&cfg)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unknown config key"), "{err}");

    std::fs::write(&cfg, "backbone = tiny\n").unwrap();
    let o = polypseg(&[
        "train",
        "--config",
        p(&cfg),
        "--override",
        "lr_schedule=step",
    ]);
    assert!(!o.status.success());

    let o = polypseg(&["train", "--config", p(&dir.path().join("missing.cfg"))]);
    assert!(!o.status.success());
}
