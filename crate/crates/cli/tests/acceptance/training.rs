//! End-to-end training criteria: overfitting, ablation wiring, resume
//! determinism and the full-size configuration.

use std::path::{Path, PathBuf};
use std::process::Command;

use polypseg::augment::{preset, Preset};
use polypseg::data::synthetic;
use polypseg::model::{Backbone, Model, NetworkSpec, PROJECTION};
use polypseg::netcore::{Graph, Mode};
use polypseg::objectives::LossConfig;
use polypseg::taxonomy::SizeThresholds;
use polypseg::trainer::{
    build_batch, read_log, run, BatchRecipe, NoObserver, RunOptions, StepLosses, TrainConfig,
    TrainState, TrainingSet,
};
use polypseg::Tensor;

use crate::{ensure, lib, Outcome};

const OVERFIT_DICE: f64 = 0.95;
const RESUME_TOL: f64 = 1e-9;

fn config(dir: &Path, name: &str, overrides: &[&str]) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::default();
    let out = format!("output_dir={}", dir.display());
    let name = format!("name={name}");
    for kv in [name.as_str(), "backbone=tiny", out.as_str()]
        .into_iter()
        .chain(overrides.iter().copied())
    {
        lib(cfg.apply_override(kv))?;
    }
    lib(cfg.validate())?;
    Ok(cfg)
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

pub fn overfit() -> Outcome {
    let dir = tempdir()?;
    let common = [
        "input_size=96",
        "augment_preset=none",
        "batch_size=4",
        "epochs=200",
        "lr0=0.001",
        "precision=f64",
        "checkpoint_every=200",
    ];
    let mut summary = Vec::new();
    for (name, flags) in [
        (
            "baseline",
            ["use_maspp=false", "use_ca=false", "use_cl_branch=false"],
        ),
        (
            "full",
            ["use_maspp=true", "use_ca=true", "use_cl_branch=true"],
        ),
    ] {
        let overrides: Vec<&str> = common.iter().chain(flags.iter()).copied().collect();
        let cfg = config(dir.path(), name, &overrides)?;
        let outcome = lib(run(&cfg, &RunOptions::default()))?;
        ensure!(
            outcome.log.len() == 200,
            "{name}: {} steps instead of 200",
            outcome.log.len()
        );
        let (_, report) = outcome.reports.first().ok_or("no evaluation report")?;
        ensure!(
            report.per_image.len() == 4,
            "{name}: evaluated {} images",
            report.per_image.len()
        );
        let dice = report.means().dice;
        ensure!(
            dice >= OVERFIT_DICE,
            "{name}: training-set Dice {dice:.4} < {OVERFIT_DICE} after 200 steps"
        );
        summary.push(format!("{name} Dice {dice:.4}"));
    }
    Ok(format!(
        "4 images at 96x96, 200 steps: {}",
        summary.join(", ")
    ))
}

fn ablation_spec(maspp: bool, ca: bool, cl: bool) -> NetworkSpec {
    NetworkSpec {
        input_size: (32, 32),
        use_maspp: maspp,
        use_ca: ca,
        use_cl_branch: cl,
        ..NetworkSpec::tiny()
    }
}

fn batch_for(
    spec: &NetworkSpec,
    seed_value: u64,
) -> Result<polypseg::trainer::TripletBatch, String> {
    let set = lib(TrainingSet::new(
        synthetic::four_categories(spec.input_size.0),
        &SizeThresholds::default(),
    ))?;
    let recipe = BatchRecipe {
        augment: preset(Preset::BaseBlur),
        k: if spec.use_cl_branch { 2 } else { 0 },
        seed: 1,
    };
    lib(build_batch(&set, &recipe, &[0, 1, 2, 3], seed_value))
}

/// Parameter names read by one recorded training-mode forward pass.
fn used_parameters(model: &mut Model<f64>, x: &Tensor<f32>) -> Result<Vec<String>, String> {
    let mut g = Graph::new();
    let xv = g.constant(x.cast());
    lib(model.forward(&mut g, Mode::Train, &xv))?;
    Ok(g.params_used().to_vec())
}

pub fn ablations() -> Outcome {
    let has = |names: &[String], part: &str| names.iter().any(|n| n.contains(part));
    for (label, maspp, ca, cl) in [
        ("baseline", false, false, false),
        ("+MASPP", true, false, false),
        ("+MASPP+CA", true, true, false),
        ("full", true, true, true),
    ] {
        let spec = ablation_spec(maspp, ca, cl);
        let mut model = lib(Model::<f64>::new(spec.clone(), 5))?;
        let batch = batch_for(&spec, 2)?;
        let used = used_parameters(&mut model, &batch.anchors)?;
        let projection = used.iter().any(|n| n.starts_with(PROJECTION));
        ensure!(
            has(&used, "/maspp/se/") == maspp && has(&used, "/maspp/") == maspp,
            "{label}: MASPP-SE usage {} != {maspp}",
            has(&used, "/maspp/se/")
        );
        ensure!(has(&used, "/ca/") == ca, "{label}: CA usage != {ca}");
        ensure!(projection == cl, "{label}: projection head usage != {cl}");
        ensure!(
            model.momentum.is_some() == cl,
            "{label}: momentum encoder presence != {cl}"
        );
        if !maspp {
            ensure!(has(&used, "/aspp/"), "{label}: plain ASPP missing");
        }
        let mut state = TrainState::new(model);
        let l = lib(polypseg::trainer::train_step(
            &mut state,
            &batch,
            &LossConfig::default(),
            1e-3,
            0,
            &mut NoObserver,
        ))?;
        ensure!(l.total.is_finite(), "{label}: non-finite loss");
    }

    // beta = 0 with the branch on against the branch off
    let loss = LossConfig {
        beta: 0.0,
        alpha: 4.0,
        ..LossConfig::default()
    };
    let mut with_cl = TrainState::new(lib(Model::<f64>::new(ablation_spec(true, true, true), 8))?);
    let mut without = TrainState::new(lib(Model::<f64>::new(ablation_spec(true, true, false), 8))?);
    let mut active_cl = 0.0;
    for step in 0..3 {
        let a = batch_for(&with_cl.model.spec, 30 + step)?;
        let b = batch_for(&without.model.spec, 30 + step)?;
        let la = lib(polypseg::trainer::train_step(
            &mut with_cl,
            &a,
            &loss,
            1e-3,
            step,
            &mut NoObserver,
        ))?;
        let lb = lib(polypseg::trainer::train_step(
            &mut without,
            &b,
            &loss,
            1e-3,
            step,
            &mut NoObserver,
        ))?;
        ensure!(
            la.total.to_bits() == lb.total.to_bits(),
            "step {step}: totals differ ({} vs {})",
            la.total,
            lb.total
        );
        active_cl += la.cl;
    }
    ensure!(
        active_cl > 0.0,
        "contrastive term was inactive, the comparison is vacuous"
    );
    let mut compared = 0;
    for (name, e) in without.model.online.iter() {
        let other = lib(with_cl.model.online.value(name))?;
        ensure!(
            e.value
                .data()
                .iter()
                .zip(other.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "beta=0 update differs at {name}"
        );
        compared += 1;
    }
    Ok(format!(
        "4 configurations train one step; baseline graph has no MASPP-SE, CA or projection; \
         beta=0 matches the no-CL run bitwise on {compared} tensors over 3 steps"
    ))
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_polypseg")
}

fn run_cli(args: &[&str], workers: &str) -> Result<String, String> {
    let out = Command::new(binary())
        .args(args)
        .env("CLPOLYP_NUM_WORKERS", workers)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure!(
        out.status.success(),
        "polypseg {args:?} failed: {}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(stdout)
}

fn compare_logs(a: &[StepLosses], b: &[StepLosses]) -> Result<f64, String> {
    ensure!(a.len() == b.len(), "log lengths {} vs {}", a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        ensure!(x.step == y.step, "step {} vs {}", x.step, y.step);
        for (u, v) in [
            (x.lr, y.lr),
            (x.bce, y.bce),
            (x.dice, y.dice),
            (x.cl, y.cl),
            (x.total, y.total),
        ] {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(worst)
}

pub fn resume() -> Outcome {
    let dir = tempdir()?;
    let overrides = [
        "input_size=64",
        "augment_preset=base_blur",
        "batch_size=4",
        "epochs=20",
        "lr0=0.001",
        "precision=f64",
        "seed=17",
        "k=2",
    ];
    let straight = config(&dir.path().join("a"), "straight", &overrides)?;
    let reference = lib(run(
        &straight,
        &RunOptions {
            workers: Some(1),
            ..RunOptions::default()
        },
    ))?;
    ensure!(
        reference.log.len() == 20,
        "{} steps instead of 20",
        reference.log.len()
    );

    let split = config(&dir.path().join("b"), "split", &overrides)?;
    let cfg_path = dir.path().join("split.cfg");
    std::fs::write(&cfg_path, split.to_text()).map_err(|e| e.to_string())?;
    let cfg_arg = cfg_path.to_string_lossy().into_owned();
    run_cli(
        &["train", "--config", &cfg_arg, "--stop-after-epoch", "10"],
        "1",
    )?;
    let run_dir = split.run_dir();
    let log_path = run_dir.join("train_log.csv");
    let partial = lib(read_log(&log_path))?;
    ensure!(
        partial.len() == 10,
        "interrupted run logged {} steps",
        partial.len()
    );
    let ckpt: PathBuf = run_dir.join("checkpoints").join("epoch_0010.ckpt");
    ensure!(ckpt.exists(), "missing {}", ckpt.display());
    // continue in a fresh process with a different loader width
    run_cli(
        &[
            "train",
            "--config",
            &cfg_arg,
            "--resume",
            &ckpt.to_string_lossy(),
        ],
        "3",
    )?;
    let resumed = lib(read_log(&log_path))?;
    let worst = compare_logs(&reference.log, &resumed)?;
    ensure!(worst <= RESUME_TOL, "resumed log deviates by {worst:e}");
    Ok(format!(
        "20 steps, interrupted after 10 and resumed in a new process: max deviation {worst:.1e}"
    ))
}

pub fn config_dry_run() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/resnet50_scenario1.cfg");
    let cfg = lib(TrainConfig::read(&path))?;
    let n = &cfg.network;
    ensure!(n.backbone == Backbone::ResNet50, "backbone {}", n.backbone);
    ensure!(n.input_size == (384, 384), "input size {:?}", n.input_size);
    ensure!(cfg.batch_size == 4, "batch size {}", cfg.batch_size);
    ensure!(cfg.lr0 == 1e-4, "lr0 {}", cfg.lr0);
    ensure!(cfg.epochs == 300, "epochs {}", cfg.epochs);
    ensure!(
        n.use_maspp && n.use_ca && n.use_cl_branch && cfg.loss.k == 4,
        "not the full configuration"
    );
    ensure!(
        cfg.to_text().contains("lr_schedule = cosine"),
        "schedule is not cosine"
    );

    let work = tempdir()?;
    let out = Command::new(binary())
        .args(["train", "--config", &path.to_string_lossy(), "--dry-run"])
        .current_dir(work.path())
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure!(
        out.status.success(),
        "dry run failed: {}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    for needle in [
        "backbone resnet50",
        "input 384x384",
        "batch 4",
        "lr0 1e-4",
        "schedule cosine",
        "epochs 300",
        "shape anchors [4, 3, 384, 384]",
        "shape positives [4, 3, 384, 384]",
        "shape negatives [16, 3, 384, 384]",
        "shape f5 [4, 2048, 24, 24]",
        "shape logits [4, 1, 384, 384]",
        "dry run ok",
    ] {
        ensure!(
            stdout.contains(needle),
            "missing {needle:?} in output:\n{stdout}"
        );
    }
    let total: f64 = stdout
        .lines()
        .find_map(|l| l.split("L_Total ").nth(1))
        .and_then(|v| v.trim().parse().ok())
        .ok_or("no L_Total in output")?;
    ensure!(total.is_finite(), "non-finite dry-run loss");
    Ok(format!(
        "384x384, batch 4, lr0 1e-4, cosine, 300 epochs; one step on ResNet-50 with L_Total {total:.4}"
    ))
}
