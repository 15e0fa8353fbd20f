//! One optimization step and evaluation.

use std::rc::Rc;

use crate::augment::{apply, preset, Preset};
use crate::data::{DatasetManifest, ImageSample};
use crate::error::{Error, Result};
use crate::model::{to_nchw, Model};
use crate::netcore::{adam_step, AdamConfig, AdamState, Graph, Mode};
use crate::objectives::{metrics, threshold_logits, LossConfig, MetricReport};
use crate::tensor::{Element, Tensor};

use super::batch::TripletBatch;

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub lr: f64,
    pub bce: f64,
    pub dice: f64,
    pub cl: f64,
    pub total: f64,
}

/// Points in [`train_step`] at which observers are called.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    /// Losses computed.
    Forward,
    /// Gradients accumulated into the online parameters.
    Backward,
    /// Adam applied.
    OptimizerStep,
    /// Momentum encoder updated.
    MomentumUpdate,
}

pub trait StepObserver<T> {
    fn observe(&mut self, event: StepEvent, model: &Model<T>);
}

/// Observer that ignores every event.
pub struct NoObserver;

impl<T> StepObserver<T> for NoObserver {
    fn observe(&mut self, _: StepEvent, _: &Model<T>) {}
}

impl<T, F: FnMut(StepEvent, &Model<T>)> StepObserver<T> for F {
    fn observe(&mut self, event: StepEvent, model: &Model<T>) {
        self(event, model)
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub adam_config: AdamConfig,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        TrainState {
            model,
            adam: AdamState::new(),
            adam_config: AdamConfig::default(),
        }
    }
}

fn scalar<T: Element>(t: &Tensor<T>) -> f64 {
    t.item().to_f64().expect("finite conversion")
}

/// Forward through both encoders, hybrid loss, backward into the online
/// parameters, Adam at `lr`, then the momentum update.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    batch: &TripletBatch,
    loss: &LossConfig,
    lr: f64,
    step: u64,
    observer: &mut dyn StepObserver<T>,
) -> Result<StepLosses> {
    let model = &mut state.model;
    let use_cl = model.spec.use_cl_branch;
    // Keys first: the momentum encoder does not depend on the online pass,
    // and its activations are freed before the online graph is built.
    let keys = if use_cl {
        let (pos, neg) = match (&batch.positives, &batch.negatives) {
            (Some(p), Some(n)) => (p, n),
            _ => {
                return Err(Error::Validation(
                    "contrastive branch needs positives and negatives".into(),
                ))
            }
        };
        let keys = model.momentum_embed(&Tensor::concat_rows(&[pos, neg])?.cast())?;
        let (b, d) = (pos.shape()[0], keys.shape()[1]);
        let split = |rows: std::ops::Range<usize>| {
            Tensor::from_vec(
                &[rows.len(), d],
                keys.data()[rows.start * d..rows.end * d].to_vec(),
            )
        };
        Some((split(0..b)?, split(b..keys.shape()[0])?))
    } else {
        None
    };
    let mut g = Graph::new();
    let x = g.constant(batch.anchors.cast());
    let out = model.forward(&mut g, Mode::Train, &x)?;
    let target = Rc::new(batch.masks.cast::<T>());
    let bce = g.bce_with_logits(&out.logits, target.clone())?;
    let probs = g.sigmoid(&out.logits);
    let dice = g.dice_loss(&probs, target, loss.dice_smooth)?;
    let seg = g.add(&bce, &dice)?;
    let (total, cl) = match (&out.embedding, keys) {
        (Some(h), Some((hp, hn))) => {
            let hp = g.constant(hp);
            let hn = g.constant(hn);
            let cl = g.triplet_loss(h, &hp, &hn, loss.alpha)?;
            let weighted = g.scale(&cl, loss.beta);
            (g.add(&seg, &weighted)?, scalar(cl.value()))
        }
        _ => (seg, 0.0),
    };
    let losses = StepLosses {
        step,
        lr,
        bce: scalar(bce.value()),
        dice: scalar(dice.value()),
        cl,
        total: scalar(total.value()),
    };
    if ![losses.bce, losses.dice, losses.cl, losses.total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step}: L_BCE={} L_Dice={} L_CL={} L_Total={} lr={lr}",
            losses.bce, losses.dice, losses.cl, losses.total
        )));
    }
    observer.observe(StepEvent::Forward, model);
    let grads = g.backward(&total)?;
    model.online.zero_grad();
    model.online.accumulate(&grads);
    observer.observe(StepEvent::Backward, model);
    adam_step(&mut model.online, &mut state.adam, lr, &state.adam_config)
        .map_err(|e| Error::Numeric(format!("step {step} (lr {lr}): {e}")))?;
    observer.observe(StepEvent::OptimizerStep, model);
    model.momentum_step()?;
    observer.observe(StepEvent::MomentumUpdate, model);
    Ok(losses)
}

/// Per-image metrics at the network resolution. Samples must already be
/// resized to the network input; only normalization is applied.
pub fn evaluate_samples<T: Element>(
    model: &mut Model<T>,
    samples: &[ImageSample],
    batch_size: usize,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let norm = preset(Preset::None);
    let mut report = MetricReport::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut views = Vec::with_capacity(chunk.len());
        for s in chunk {
            if s.size() != model.spec.input_size {
                return Err(Error::shape(
                    "evaluate",
                    format!(
                        "{} is {:?}, network expects {:?}",
                        s.id,
                        s.size(),
                        model.spec.input_size
                    ),
                ));
            }
            views.push(apply(&norm, s, 0)?.image);
        }
        let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let logits = model.predict(&to_nchw(&refs)?)?;
        for (i, s) in chunk.iter().enumerate() {
            let pred = threshold_logits(logits.row(i));
            let gt: Vec<u8> = s.mask.iter().copied().collect();
            report.push(s.id.clone(), metrics(&pred, &gt)?);
        }
    }
    Ok(report)
}

/// Loads a test manifest at the network resolution and evaluates it.
pub fn evaluate<T: Element>(
    model: &mut Model<T>,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Validation(format!(
            "manifest {} is empty",
            manifest.name
        )));
    }
    let samples = manifest.load_all(model.spec.input_size)?;
    evaluate_samples(model, &samples, batch_size)
}
