//! Full training runs: data preparation, epochs, checkpoints, logs and the
//! final evaluation.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::augment::preset;
use crate::data::{
    make_multi_source_split, make_scenario_split, synthetic, DatasetManifest, ImageSample, Scenario,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::netcore::{cosine_lr, Checkpoint, CheckpointMeta, Ctx, Graph, Mode, TensorRole};
use crate::objectives::MetricReport;
use crate::seed;
use crate::taxonomy::SizeThresholds;
use crate::tensor::Element;

use super::batch::{
    build_batch, epoch_batches, epoch_order, num_workers, BatchRecipe, TrainingSet,
};
use super::config::{DataSource, Precision, TrainConfig};
use super::step::{evaluate_samples, train_step, NoObserver, StepLosses, TrainState};

pub const LOG_HEADER: [&str; 6] = ["step", "lr", "L_BCE", "L_Dice", "L_CL", "L_Total"];

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Return after this many completed epochs (a checkpoint is written).
    pub stop_after_epoch: Option<u64>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Loader threads; `None` reads the environment.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub completed_epochs: u64,
    pub checkpoints: Vec<PathBuf>,
    /// Every step since the start of the run, including resumed history.
    pub log: Vec<StepLosses>,
    /// Final evaluation per test set; empty when stopped early.
    pub reports: Vec<(String, MetricReport)>,
}

/// Training samples and named test sets at the network resolution.
pub struct PreparedData {
    pub train: Vec<ImageSample>,
    pub tests: Vec<(String, Vec<ImageSample>)>,
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let size = cfg.network.input_size;
    let load = |m: &DatasetManifest| m.load_all(size);
    match &cfg.data {
        DataSource::Synthetic => {
            if size.0 != size.1 {
                return Err(Error::Config(
                    "synthetic data needs a square input size".into(),
                ));
            }
            let s = synthetic::four_categories(size.0);
            Ok(PreparedData {
                train: s.clone(),
                tests: vec![("synthetic".into(), s)],
            })
        }
        DataSource::Roots(roots) => {
            let sources = roots
                .iter()
                .map(|r| DatasetManifest::discover(r))
                .collect::<Result<Vec<_>>>()?;
            let (train, tests) = if cfg.scenario == Scenario::II {
                make_multi_source_split(&sources, cfg.seed)?
            } else {
                let (tr, te) = make_scenario_split(&sources[0], cfg.scenario, cfg.seed)?;
                (tr, vec![te])
            };
            Ok(PreparedData {
                train: load(&train)?,
                tests: tests
                    .iter()
                    .map(|t| Ok((t.name.clone(), load(t)?)))
                    .collect::<Result<_>>()?,
            })
        }
        DataSource::Manifests { train, test } => {
            let train = DatasetManifest::read(train)?;
            let tests = test
                .iter()
                .map(|p| {
                    let m = DatasetManifest::read(p)?;
                    Ok((m.name.clone(), load(&m)?))
                })
                .collect::<Result<_>>()?;
            Ok(PreparedData {
                train: load(&train)?,
                tests,
            })
        }
    }
}

/// Builds the model for `cfg`, loading backbone weights when configured.
pub fn build_model<T: Element>(cfg: &TrainConfig) -> Result<Model<T>> {
    let mut model = Model::new(cfg.network.clone(), seed::derive(cfg.seed, "init"))?;
    if let Some(path) = &cfg.backbone_weights {
        if path.exists() {
            model.load_backbone_weights(path)?;
        } else {
            log::warn!(
                "backbone weights {} not found; using random initialization",
                path.display()
            );
        }
    }
    Ok(model)
}

/// Rebuilds the configuration and model stored in a run checkpoint.
pub fn load_checkpoint_model<T: Element>(path: &Path) -> Result<(TrainConfig, Model<T>)> {
    let ck = Checkpoint::<T>::load(path)?;
    if ck.meta.config.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} carries no configuration",
            path.display()
        )));
    }
    let cfg = TrainConfig::parse(&ck.meta.config)?;
    let mut model = Model::new(cfg.network.clone(), 0)?;
    model.restore(&ck)?;
    Ok((cfg, model))
}

fn recipe(cfg: &TrainConfig) -> BatchRecipe {
    BatchRecipe {
        augment: preset(cfg.augment_preset),
        k: if cfg.network.use_cl_branch {
            cfg.loss.k
        } else {
            0
        },
        seed: cfg.seed,
    }
}

fn save_checkpoint<T: Element>(
    state: &TrainState<T>,
    meta: CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut ck = Checkpoint::new(meta);
    for (name, role, t) in state.model.named_tensors() {
        ck.insert(name, role, t);
    }
    for (prefix, moments) in [("adam/m", &state.adam.m), ("adam/v", &state.adam.v)] {
        for (name, t) in moments {
            ck.insert(
                format!("{prefix}/{name}"),
                TensorRole::OptimizerState,
                t.clone(),
            );
        }
    }
    ck.save(path)
}

fn restore_state<T: Element>(state: &mut TrainState<T>, ck: &Checkpoint<T>) -> Result<()> {
    state.model.restore(ck)?;
    state.adam.t = ck.meta.optimizer_t;
    state.adam.m.clear();
    state.adam.v.clear();
    for (name, (role, t)) in &ck.tensors {
        if *role != TensorRole::OptimizerState {
            continue;
        }
        if let Some(n) = name.strip_prefix("adam/m/") {
            state.adam.m.insert(n.to_string(), t.clone());
        } else if let Some(n) = name.strip_prefix("adam/v/") {
            state.adam.v.insert(n.to_string(), t.clone());
        }
    }
    Ok(())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Validation(format!("{}: {e}", path.display()))
}

/// Reads a `train_log.csv`.
pub fn read_log(path: &Path) -> Result<Vec<StepLosses>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Validation(format!("{}: bad log row {rec:?}", path.display()))
            })
        };
        out.push(StepLosses {
            step: f(0)? as u64,
            lr: f(1)?,
            bce: f(2)?,
            dice: f(3)?,
            cl: f(4)?,
            total: f(5)?,
        });
    }
    Ok(out)
}

fn log_record(l: &StepLosses) -> [String; 6] {
    [
        l.step.to_string(),
        l.lr.to_string(),
        l.bce.to_string(),
        l.dice.to_string(),
        l.cl.to_string(),
        l.total.to_string(),
    ]
}

/// Rewrites the log with `rows` and returns a writer appending to it.
fn open_log(path: &Path, rows: &[StepLosses]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(LOG_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(log_record(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

/// Runs training per `cfg` in the configured precision.
pub fn run(cfg: &TrainConfig, opts: &RunOptions) -> Result<RunOutcome> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, opts),
        Precision::F64 => run_typed::<f64>(cfg, opts),
    }
}

pub fn run_typed<T: Element>(cfg: &TrainConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let set = Arc::new(TrainingSet::new(data.train, &SizeThresholds::default())?);
    let steps_per_epoch = set.steps_per_epoch(cfg.batch_size) as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Validation(format!(
            "{} training samples cannot fill a batch of {}",
            set.len(),
            cfg.batch_size
        )));
    }
    let total_steps = cfg.epochs * steps_per_epoch;
    let recipe = Arc::new(recipe(cfg));
    let workers = opts.workers.unwrap_or_else(num_workers);

    let run_dir = cfg.run_dir();
    let ck_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let cfg_path = run_dir.join("config.cfg");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut state = TrainState::new(build_model::<T>(cfg)?);
    let mut start_epoch = 0;
    let mut log_rows = Vec::new();
    let log_path = run_dir.join("train_log.csv");
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} was written by a different configuration (hash {}, current {})",
                path.display(),
                ck.meta.config_hash,
                cfg.hash()
            )));
        }
        restore_state(&mut state, &ck)?;
        start_epoch = ck.meta.epoch;
        if log_path.exists() {
            log_rows = read_log(&log_path)?;
            log_rows.retain(|r| r.step < ck.meta.step);
        }
        log::info!(
            "resumed {} at epoch {start_epoch}, step {}",
            path.display(),
            ck.meta.step
        );
    }
    let mut log_writer = open_log(&log_path, &log_rows)?;

    log::info!(
        "{}: {} training images, {steps_per_epoch} steps/epoch, {} epochs, {} tensors, {} weights",
        cfg.name,
        set.len(),
        cfg.epochs,
        state.model.online.len(),
        state.model.online.weight_count()
    );
    let mut checkpoints = Vec::new();
    let mut epoch = start_epoch;
    while epoch < cfg.epochs {
        let plan = epoch_order(set.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = 0.0;
        for (i, batch) in
            epoch_batches(set.clone(), recipe.clone(), plan, epoch, workers).enumerate()
        {
            let batch = batch?;
            let t = epoch * steps_per_epoch + i as u64;
            let lr = cosine_lr(t, total_steps, cfg.lr0);
            let losses = train_step(&mut state, &batch, &cfg.loss, lr, t, &mut NoObserver)?;
            log_writer
                .write_record(log_record(&losses))
                .map_err(csv_err(&log_path))?;
            sum += losses.total;
            log_rows.push(losses);
        }
        log_writer.flush().map_err(|e| Error::io(&log_path, e))?;
        epoch += 1;
        log::info!(
            "epoch {epoch}/{}: mean L_Total {:.5}",
            cfg.epochs,
            sum / steps_per_epoch as f64
        );
        let stop = opts.stop_after_epoch == Some(epoch);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs || stop {
            let path = ck_dir.join(format!("epoch_{epoch:04}.ckpt"));
            let meta = CheckpointMeta {
                epoch,
                step: epoch * steps_per_epoch,
                optimizer_t: state.adam.t,
                config_hash: cfg.hash(),
                config: cfg.to_text(),
            };
            save_checkpoint(&state, meta, &path)?;
            checkpoints.push(path);
        }
        if stop {
            break;
        }
    }

    let mut reports = Vec::new();
    if epoch == cfg.epochs {
        let metrics_dir = run_dir.join("metrics");
        for (name, samples) in &data.tests {
            let report = evaluate_samples(&mut state.model, samples, cfg.batch_size)?;
            report.write(&metrics_dir, name)?;
            let m = report.means();
            log::info!("{name}: dice {:.4} iou {:.4}", m.dice, m.iou);
            reports.push((name.clone(), report));
        }
    }
    Ok(RunOutcome {
        run_dir,
        completed_epochs: epoch,
        checkpoints,
        log: log_rows,
        reports,
    })
}

/// Result of a single-step shape walk.
#[derive(Clone, Debug)]
pub struct DryRun {
    pub shapes: Vec<(String, Vec<usize>)>,
    pub losses: StepLosses,
    pub weights: usize,
}

/// Builds the configured model and performs one forward/backward/update
/// step on a generated batch at the configured resolution and batch size.
pub fn dry_run(cfg: &TrainConfig) -> Result<DryRun> {
    match cfg.precision {
        Precision::F32 => dry_run_typed::<f32>(cfg),
        Precision::F64 => dry_run_typed::<f64>(cfg),
    }
}

fn dry_run_typed<T: Element>(cfg: &TrainConfig) -> Result<DryRun> {
    cfg.validate()?;
    let (h, w) = cfg.network.input_size;
    if h != w || h % 8 != 0 {
        return Err(Error::Config(
            "dry run needs a square input size divisible by 8".into(),
        ));
    }
    let set = TrainingSet::new(synthetic::four_categories(h), &SizeThresholds::default())?;
    let indices: Vec<usize> = (0..cfg.batch_size).map(|i| i % set.len()).collect();
    let batch = build_batch(
        &set,
        &recipe(cfg),
        &indices,
        seed::derive(cfg.seed, "dry_run"),
    )?;
    let mut state = TrainState::new(build_model::<T>(cfg)?);

    let mut shapes = vec![
        ("anchors".to_string(), batch.anchors.shape().to_vec()),
        ("masks".to_string(), batch.masks.shape().to_vec()),
    ];
    if let (Some(p), Some(n)) = (&batch.positives, &batch.negatives) {
        shapes.push(("positives".into(), p.shape().to_vec()));
        shapes.push(("negatives".into(), n.shape().to_vec()));
    }
    {
        let spec = state.model.spec.clone();
        let mut g = Graph::no_grad();
        let x = g.constant(batch.anchors.cast());
        let mut cx = Ctx::new(&mut g, &mut state.model.online, Mode::Eval);
        let f = crate::model::encode(&mut cx, &spec, crate::model::QUERY_ENCODER, &x)?;
        shapes.push(("f2".into(), f.f2.shape().to_vec()));
        shapes.push(("f5".into(), f.f5.shape().to_vec()));
        shapes.push(("pooled".into(), f.pooled.shape().to_vec()));
        let fused = crate::model::maspp(&mut cx, &spec, &f.f5)?;
        shapes.push(("maspp".into(), fused.shape().to_vec()));
        let logits = crate::model::decode(&mut cx, &spec, &fused, &f.f2)?;
        shapes.push(("logits".into(), logits.shape().to_vec()));
    }
    let losses = train_step(
        &mut state,
        &batch,
        &cfg.loss,
        cosine_lr(0, cfg.epochs, cfg.lr0),
        0,
        &mut NoObserver,
    )?;
    Ok(DryRun {
        shapes,
        losses,
        weights: state.model.online.weight_count(),
    })
}
