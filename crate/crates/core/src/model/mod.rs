//! The segmentation network with its momentum-encoder contrastive branch.
//!
//! Online parameters live in one [`ParameterSet`] under `query_encoder/`,
//! `projection/` and `decoder/`. The momentum encoder is a second set holding
//! copies of the `query_encoder/` and `projection/` entries under the same
//! names; checkpoints store it under `momentum_encoder/`.

mod backbone;
mod heads;
mod spec;

use std::path::Path;

use ndarray::ArrayView3;

pub use backbone::{encode, EncoderFeatures};
pub use heads::{aspp, ca_fuse, concat_fuse, decode, maspp, project, se_reweight};
pub use spec::{Backbone, NetworkSpec};

use crate::error::{Error, Result};
use crate::netcore::{Checkpoint, Ctx, EntryKind, Graph, Mode, ParameterSet, TensorRole, Var};
use crate::tensor::{cst, Element, Tensor};

pub const QUERY_ENCODER: &str = "query_encoder";
pub const PROJECTION: &str = "projection";
pub const DECODER: &str = "decoder";
pub const MOMENTUM_ENCODER: &str = "momentum_encoder";

/// Side length of the dummy batch used to trace parameter shapes.
const TRACE_SIZE: usize = 32;

/// Stacks `H x W x 3` images into an `[B, 3, H, W]` tensor.
pub fn to_nchw<T: Element>(images: &[ArrayView3<'_, f32>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::shape(
                "to_nchw",
                format!("{:?} vs {:?}", img.dim(), (h, w, c)),
            ));
        }
        for ch in 0..c {
            data.extend(
                img.index_axis(ndarray::Axis(2), ch)
                    .iter()
                    .map(|&v| cst::<T>(f64::from(v))),
            );
        }
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// `theta_k <- m * theta_k + (1 - m) * theta_q` over every weight. Both sets
/// must share names and shapes.
pub fn momentum_update<T: Element>(
    theta_k: &mut ParameterSet<T>,
    theta_q: &ParameterSet<T>,
    m: f64,
) -> Result<()> {
    theta_k.check_same_structure(theta_q)?;
    ema(theta_k, theta_q, m)
}

/// EMA of the weights of `theta_k` towards the same-named entries of
/// `theta_q`, which may hold additional entries.
fn ema<T: Element>(theta_k: &mut ParameterSet<T>, theta_q: &ParameterSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!(
            "momentum must be in [0, 1], got {m}"
        )));
    }
    let (keep, take) = (cst::<T>(m), cst::<T>(1.0 - m));
    for (name, k) in theta_k.iter_mut() {
        if k.kind != EntryKind::Weight {
            continue;
        }
        let q = theta_q
            .get(name)
            .ok_or_else(|| Error::Validation(format!("parameter structure differs at {name}")))?;
        if q.value.shape() != k.value.shape() {
            return Err(Error::Validation(format!(
                "parameter structure differs at {name}"
            )));
        }
        for (a, &b) in k.value.data_mut().iter_mut().zip(q.value.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Outputs of the online network.
pub struct OnlineOutput<T> {
    /// `[B, 1, H, W]` segmentation logits.
    pub logits: Var<T>,
    /// Unit-norm query embeddings, present with the contrastive branch.
    pub embedding: Option<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub online: ParameterSet<T>,
    /// Present exactly when the contrastive branch is enabled.
    pub momentum: Option<ParameterSet<T>>,
}

impl<T: Element> Model<T> {
    /// Randomly initialized network. The momentum encoder starts as an exact
    /// copy of the query encoder and projection head.
    pub fn new(spec: NetworkSpec, seed_value: u64) -> Result<Self> {
        spec.validate()?;
        let mut online = ParameterSet::new();
        let traced = NetworkSpec {
            input_size: (TRACE_SIZE, TRACE_SIZE),
            use_cl_branch: true,
            ..spec.clone()
        };
        // Non-constant so that batch-normalized activations stay nonzero.
        let n = 2 * 3 * TRACE_SIZE * TRACE_SIZE;
        let dummy = Tensor::from_vec(
            &[2, 3, TRACE_SIZE, TRACE_SIZE],
            (0..n)
                .map(|i| cst::<T>(((i * 7919) % 101) as f64 / 101.0 - 0.5))
                .collect(),
        )?;
        {
            let mut g = Graph::no_grad();
            let x = g.constant(dummy);
            let mut cx = Ctx::initializing(&mut g, &mut online, seed_value);
            forward_online(&mut cx, &traced, &x)?;
        }
        if !spec.use_cl_branch {
            online = online.subset(QUERY_ENCODER).merged(online.subset(DECODER));
        }
        let mut model = Model {
            spec,
            online,
            momentum: None,
        };
        model.reset_momentum();
        Ok(model)
    }

    /// Loads backbone weights from a checkpoint-format file whose names use
    /// torchvision's dotted ResNet naming (`layer1.0.conv1.weight`) or this
    /// crate's `query_encoder/...` paths. The momentum copy is refreshed.
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<usize> {
        let ck = Checkpoint::<T>::load(path)?;
        let mut loaded = 0;
        for (name, (_, t)) in ck.tensors {
            let mapped = if name.starts_with(QUERY_ENCODER) {
                name.clone()
            } else {
                format!("{QUERY_ENCODER}/{}", name.replace('.', "/"))
            };
            let Some(e) = self.online.get_mut(&mapped) else {
                log::debug!("ignoring {name}: no matching parameter");
                continue;
            };
            if e.value.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "{name}: file shape {:?}, network expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
            loaded += 1;
        }
        log::info!("loaded {loaded} backbone tensors from {}", path.display());
        self.reset_momentum();
        Ok(loaded)
    }

    /// Sets the momentum encoder to an exact copy of the online encoder and
    /// projection head (or removes it without the contrastive branch).
    pub fn reset_momentum(&mut self) {
        self.momentum = self.spec.use_cl_branch.then(|| {
            let mut m = self
                .online
                .subset(QUERY_ENCODER)
                .merged(self.online.subset(PROJECTION));
            m.freeze_all();
            m
        });
    }

    /// Online forward pass: segmentation logits and, with the contrastive
    /// branch, the query embedding of the same batch.
    pub fn forward(
        &mut self,
        graph: &mut Graph<T>,
        mode: Mode,
        x: &Var<T>,
    ) -> Result<OnlineOutput<T>> {
        let mut cx = Ctx::new(graph, &mut self.online, mode);
        forward_online(&mut cx, &self.spec, x)
    }

    /// Inference logits with running batch-norm statistics. The projection
    /// head and momentum encoder are not touched.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let mut cx = Ctx::new(&mut g, &mut self.online, Mode::Eval);
        let feats = encode(&mut cx, &self.spec, QUERY_ENCODER, &xv)?;
        let fused = maspp(&mut cx, &self.spec, &feats.f5)?;
        let logits = decode(&mut cx, &self.spec, &fused, &feats.f2)?;
        Ok(logits.value().clone())
    }

    /// Momentum-encoder embeddings. Always run on a non-recording graph;
    /// batch statistics of the momentum encoder are updated.
    pub fn momentum_embed(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = &self.spec;
        let params = self
            .momentum
            .as_mut()
            .ok_or_else(|| Error::Config("contrastive branch is disabled".into()))?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let mut cx = Ctx::new(&mut g, params, Mode::Train);
        let feats = encode(&mut cx, spec, QUERY_ENCODER, &xv)?;
        let h = project(&mut cx, spec, &feats.pooled)?;
        Ok(h.value().clone())
    }

    /// EMA step of the momentum encoder towards the online weights.
    pub fn momentum_step(&mut self) -> Result<()> {
        let m = self.spec.momentum;
        match self.momentum.as_mut() {
            Some(k) => ema(k, &self.online, m),
            None => Ok(()),
        }
    }

    /// Every tensor under its checkpoint name, momentum entries prefixed with
    /// `momentum_encoder/`.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, Tensor<T>)> {
        let mut out: Vec<_> = self
            .online
            .iter()
            .map(|(n, e)| (n.clone(), e.kind.into(), e.value.clone()))
            .collect();
        if let Some(m) = &self.momentum {
            out.extend(m.iter().map(|(n, e)| {
                (
                    format!("{MOMENTUM_ENCODER}/{n}"),
                    e.kind.into(),
                    e.value.clone(),
                )
            }));
        }
        out
    }

    /// Restores values written by [`Model::named_tensors`]. Every entry of the
    /// model must be present.
    pub fn restore<U: Element>(&mut self, ck: &Checkpoint<U>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let (_, t) = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.cast())
        };
        for (name, e) in self.online.iter_mut() {
            e.value = fetch(name, e.value.shape())?;
        }
        if let Some(m) = self.momentum.as_mut() {
            for (name, e) in m.iter_mut() {
                e.value = fetch(&format!("{MOMENTUM_ENCODER}/{name}"), e.value.shape())?;
            }
        }
        Ok(())
    }
}

/// Full online graph on an existing context.
pub fn forward_online<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    x: &Var<T>,
) -> Result<OnlineOutput<T>> {
    let feats = encode(cx, spec, QUERY_ENCODER, x)?;
    let embedding = if spec.use_cl_branch {
        Some(project(cx, spec, &feats.pooled)?)
    } else {
        None
    };
    let fused = maspp(cx, spec, &feats.f5)?;
    let logits = decode(cx, spec, &fused, &feats.f2)?;
    Ok(OnlineOutput { logits, embedding })
}
