use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polypseg::augment::{preset, view_pair, Preset};
use polypseg::data::{load_mask, save_mask, save_rgb, synthetic, DatasetManifest};
use polypseg::model::NetworkSpec;
use polypseg::ndarray::Array3;
use polypseg::netcore::cosine_lr;
use polypseg::taxonomy::{classify_mask, SizeThresholds};
use polypseg::trainer::{
    dry_run, evaluate, load_checkpoint_model, network_gradcheck, run, Precision, RunOptions,
    TrainConfig,
};
use polypseg::{Element, Error, Result};

#[derive(Parser)]
#[command(
    name = "polypseg",
    version,
    about = "Polyp segmentation with a contrastive auxiliary branch"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Build the model and run one step on a generated batch.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after_epoch: Option<u64>,
    },
    /// Evaluate a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report directory; defaults to `<run>/metrics` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
    /// Print the count/size category of every mask under `<root>/masks`.
    ClassifyMasks {
        #[arg(long)]
        root: PathBuf,
    },
    /// Write augmented anchor/positive views for inspection.
    AugmentPreview {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "augment_preview")]
        out: PathBuf,
        /// Dataset root to take the first image from; generated data otherwise.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Central-difference check of the whole network and loss.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            overrides,
            dry_run,
            resume,
            stop_after_epoch,
        } => train(&config, &overrides, dry_run, resume, stop_after_epoch),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            batch_size,
        } => eval(&checkpoint, &manifest, out, batch_size),
        Command::ClassifyMasks { root } => classify(&root),
        Command::AugmentPreview {
            preset,
            n,
            out,
            root,
            size,
            seed,
        } => augment_preview(&preset, n, &out, root.as_deref(), size, seed),
        Command::Gradcheck {
            preset,
            size,
            samples,
            seed,
        } => gradcheck(&preset, size, samples, seed),
    }
}

fn train(
    config: &Path,
    overrides: &[String],
    dry: bool,
    resume: Option<PathBuf>,
    stop_after_epoch: Option<u64>,
) -> Result<()> {
    let mut cfg = TrainConfig::read(config)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    let n = &cfg.network;
    println!(
        "config {}: backbone {} input {}x{} batch {} lr0 {:e} schedule cosine epochs {} scenario {} preset {}",
        cfg.name,
        n.backbone,
        n.input_size.0,
        n.input_size.1,
        cfg.batch_size,
        cfg.lr0,
        cfg.epochs,
        cfg.scenario,
        cfg.augment_preset
    );
    println!(
        "network: maspp {} ca {} cl {} momentum {} alpha {} beta {} k {} precision {}",
        n.use_maspp,
        n.use_ca,
        n.use_cl_branch,
        n.momentum,
        cfg.loss.alpha,
        cfg.loss.beta,
        cfg.loss.k,
        cfg.precision
    );
    if dry {
        let report = dry_run(&cfg)?;
        for (name, shape) in &report.shapes {
            println!("shape {name} {shape:?}");
        }
        let l = report.losses;
        println!("weights {}", report.weights);
        println!(
            "dry run step: lr {:e} L_BCE {:.6} L_Dice {:.6} L_CL {:.6} L_Total {:.6}",
            l.lr, l.bce, l.dice, l.cl, l.total
        );
        println!(
            "cosine schedule: lr(0) {:e} lr(end) {:e}",
            cosine_lr(0, cfg.epochs, cfg.lr0),
            cosine_lr(cfg.epochs, cfg.epochs, cfg.lr0)
        );
        println!("dry run ok");
        return Ok(());
    }
    let outcome = run(
        &cfg,
        &RunOptions {
            stop_after_epoch,
            resume,
            workers: None,
        },
    )?;
    println!(
        "{} epochs done, {} steps logged in {}",
        outcome.completed_epochs,
        outcome.log.len(),
        outcome.run_dir.display()
    );
    for (name, report) in &outcome.reports {
        let m = report.means();
        println!(
            "{name}: dice {:.4} iou {:.4} precision {:.4} recall {:.4} f2 {:.4}",
            m.dice, m.iou, m.precision, m.recall, m.f2
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, out: Option<PathBuf>, batch_size: usize) -> Result<()> {
    let m = DatasetManifest::read(manifest)?;
    let out = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(Path::parent)
            .unwrap_or(Path::new("."))
            .join("metrics")
    });
    // The stored config decides the precision; f32 storage loads losslessly.
    let (cfg, _) = load_checkpoint_model::<f32>(checkpoint)?;
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(checkpoint, &m, &out, batch_size),
        Precision::F64 => eval_typed::<f64>(checkpoint, &m, &out, batch_size),
    }
}

fn eval_typed<T: Element>(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    out: &Path,
    batch_size: usize,
) -> Result<()> {
    let (_, mut model) = load_checkpoint_model::<T>(checkpoint)?;
    let report = evaluate(&mut model, manifest, batch_size)?;
    report.write(out, &manifest.name)?;
    let m = report.means();
    println!(
        "{}: {} images, dice {:.4} iou {:.4} precision {:.4} recall {:.4} f2 {:.4}",
        manifest.name,
        report.per_image.len(),
        m.dice,
        m.iou,
        m.precision,
        m.recall,
        m.f2
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn classify(root: &Path) -> Result<()> {
    let manifest = DatasetManifest::discover(root)?;
    let thresholds = SizeThresholds::default();
    let mut histogram = std::collections::BTreeMap::<String, usize>::new();
    println!("id,component_count,area_fraction,count_class,size_class");
    for e in &manifest.entries {
        let mask = load_mask(&e.mask)?;
        match classify_mask(mask.view(), &thresholds) {
            Ok(t) => {
                println!(
                    "{},{},{:.6},{},{}",
                    e.id,
                    t.component_count,
                    t.area_fraction,
                    t.count_class.as_str(),
                    t.size_class.as_str()
                );
                *histogram.entry(t.to_string()).or_default() += 1;
            }
            Err(err) => {
                log::warn!("{}: {err}", e.id);
                *histogram.entry("empty".into()).or_default() += 1;
            }
        }
    }
    eprintln!("category counts:");
    for (k, v) in &histogram {
        eprintln!("  {k}: {v}");
    }
    Ok(())
}

fn augment_preview(
    name: &str,
    n: usize,
    out: &Path,
    root: Option<&Path>,
    size: usize,
    seed: u64,
) -> Result<()> {
    let p: Preset = name.parse()?;
    let spec = preset(p);
    let sample = match root {
        Some(r) => {
            let m = DatasetManifest::discover(r)?;
            let first = m
                .entries
                .first()
                .ok_or_else(|| Error::Validation(format!("{} has no images", r.display())))?;
            first.load((size, size))?
        }
        None => {
            if !size.is_multiple_of(8) {
                return Err(Error::Config("--size must be a multiple of 8".into()));
            }
            synthetic::four_categories(size).swap_remove(1)
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // views are normalized to [-1, 1]
    let show = |a: &Array3<f32>| a.mapv(|v| v * 0.5 + 0.5);
    for i in 0..n {
        let pair = view_pair(
            &spec,
            &sample,
            polypseg::seed::derive(seed, &format!("preview/{i}")),
        )?;
        save_rgb(
            &show(&pair.anchor.image),
            &out.join(format!("{i:03}_anchor.png")),
        )?;
        if let Some(mask) = &pair.anchor.mask {
            save_mask(mask, &out.join(format!("{i:03}_mask.png")))?;
        }
        save_rgb(
            &show(&pair.positive.image),
            &out.join(format!("{i:03}_positive.png")),
        )?;
    }
    println!("wrote {n} previews of {} to {}", p, out.display());
    Ok(())
}

fn gradcheck(name: &str, size: usize, samples: usize, seed: u64) -> Result<()> {
    let mut spec = NetworkSpec::preset(name.parse()?);
    spec.input_size = (size, size);
    let r = network_gradcheck(&spec, samples, seed)?;
    println!(
        "{} entries checked ({} at a reduced step), max relative error {:.3e}, worst {:?}",
        r.checked, r.refined, r.max_rel_error, r.worst
    );
    Ok(())
}
