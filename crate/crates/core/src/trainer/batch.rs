//! Triplet batch assembly and the background loader.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;

use crate::augment::{apply, AugmentSpec, ViewMode};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::to_nchw;
use crate::seed;
use crate::taxonomy::{classify_mask, select_negatives, MaskTaxonomy, SizeThresholds};
use crate::tensor::Tensor;

pub const NUM_WORKERS_ENV: &str = "CLPOLYP_NUM_WORKERS";

/// Training samples with their precomputed mask categories.
pub struct TrainingSet {
    pub samples: Vec<ImageSample>,
    pub taxonomy: Vec<(String, MaskTaxonomy)>,
    by_id: HashMap<String, usize>,
}

impl TrainingSet {
    pub fn new(samples: Vec<ImageSample>, thresholds: &SizeThresholds) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let mut taxonomy = Vec::with_capacity(samples.len());
        let mut by_id = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            let t = classify_mask(s.mask.view(), thresholds)
                .map_err(|e| Error::Validation(format!("{}: {e}", s.id)))?;
            taxonomy.push((s.id.clone(), t));
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(TrainingSet {
            samples,
            taxonomy,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Full batches per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size
    }
}

/// What a batch needs beyond the samples.
#[derive(Clone, Debug)]
pub struct BatchRecipe {
    pub augment: AugmentSpec,
    /// Negatives per anchor; zero skips positives and negatives entirely.
    pub k: usize,
    pub seed: u64,
}

/// `B` anchors with masks, `B` positives and `B * K` negatives, all
/// `[N, C, H, W]`. Negatives of anchor `i` are rows `i*K .. (i+1)*K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchor_ids: Vec<String>,
    pub anchors: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub positives: Option<Tensor<f32>>,
    pub negatives: Option<Tensor<f32>>,
    pub negative_ids: Vec<Vec<String>>,
    pub anchor_taxonomy: Vec<MaskTaxonomy>,
    pub negative_taxonomy: Vec<Vec<MaskTaxonomy>>,
}

impl TripletBatch {
    pub fn batch_size(&self) -> usize {
        self.anchor_ids.len()
    }
}

/// Sample indices of every batch of `epoch`, reshuffled per epoch.
pub fn epoch_order(n: usize, batch_size: usize, base: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(base, &format!("epoch/{epoch}/order")));
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

fn stack_images(views: &[ndarray::Array3<f32>]) -> Result<Tensor<f32>> {
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    to_nchw(&refs)
}

/// Builds the batch for `indices`. Every random draw is seeded from
/// `batch_seed`, the role and the sample position, so anchors are
/// independent of whether positives and negatives are built.
pub fn build_batch(
    set: &TrainingSet,
    recipe: &BatchRecipe,
    indices: &[usize],
    batch_seed: u64,
) -> Result<TripletBatch> {
    let joint = recipe.augment.with_mode(ViewMode::Joint);
    let image_only = recipe.augment.with_mode(ViewMode::ImageOnly);
    let mut anchors = Vec::new();
    let mut masks = Vec::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut out = TripletBatch {
        anchor_ids: Vec::new(),
        anchors: Tensor::zeros(&[0]),
        masks: Tensor::zeros(&[0]),
        positives: None,
        negatives: None,
        negative_ids: Vec::new(),
        anchor_taxonomy: Vec::new(),
        negative_taxonomy: Vec::new(),
    };
    for (pos, &i) in indices.iter().enumerate() {
        let sample = set
            .samples
            .get(i)
            .ok_or_else(|| Error::Validation(format!("sample index {i} out of range")))?;
        let label = |role: &str| seed::derive(batch_seed, &format!("{pos}/{role}"));
        let a = apply(&joint, sample, label("anchor"))?;
        let mask = a.mask.expect("joint mode yields a mask");
        masks.push(mask.mapv(f32::from).insert_axis(ndarray::Axis(2)));
        anchors.push(a.image);
        let tax = set.taxonomy[i].1;
        out.anchor_ids.push(sample.id.clone());
        out.anchor_taxonomy.push(tax);
        if recipe.k == 0 {
            continue;
        }
        positives.push(apply(&image_only, sample, label("positive"))?.image);
        let ids = select_negatives(&tax, &set.taxonomy, recipe.k, label("negatives"))?;
        let mut taxes = Vec::with_capacity(ids.len());
        for (j, id) in ids.iter().enumerate() {
            let n = set.by_id[id];
            negatives.push(
                apply(
                    &image_only,
                    &set.samples[n],
                    label(&format!("negative/{j}")),
                )?
                .image,
            );
            taxes.push(set.taxonomy[n].1);
        }
        out.negative_ids.push(ids);
        out.negative_taxonomy.push(taxes);
    }
    out.anchors = stack_images(&anchors)?;
    out.masks = stack_images(&masks)?;
    if recipe.k > 0 {
        out.positives = Some(stack_images(&positives)?);
        out.negatives = Some(stack_images(&negatives)?);
    }
    Ok(out)
}

/// Seed of batch `index` of `epoch`.
pub fn batch_seed(base: u64, epoch: u64, index: usize) -> u64 {
    seed::derive(base, &format!("epoch/{epoch}/batch/{index}"))
}

/// Worker count from the environment, default 1.
pub fn num_workers() -> usize {
    match std::env::var(NUM_WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                log::warn!("ignoring {NUM_WORKERS_ENV}={v:?}; using 1 worker");
                1
            }
        },
        Err(_) => 1,
    }
}

/// Batches of one epoch in order. With more than one worker they are built
/// ahead on background threads through a bounded queue; results do not
/// depend on the worker count.
pub fn epoch_batches(
    set: Arc<TrainingSet>,
    recipe: Arc<BatchRecipe>,
    plan: Vec<Vec<usize>>,
    epoch: u64,
    workers: usize,
) -> Box<dyn Iterator<Item = Result<TripletBatch>>> {
    let base = recipe.seed;
    if workers <= 1 {
        return Box::new(
            plan.into_iter()
                .enumerate()
                .map(move |(i, idx)| build_batch(&set, &recipe, &idx, batch_seed(base, epoch, i))),
        );
    }
    let total = plan.len();
    let plan = Arc::new(plan);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<TripletBatch>)>(workers * 2);
    for w in 0..workers {
        let (set, recipe, plan, tx) = (set.clone(), recipe.clone(), plan.clone(), tx.clone());
        thread::spawn(move || {
            for i in (w..plan.len()).step_by(workers) {
                let b = build_batch(&set, &recipe, &plan[i], batch_seed(base, epoch, i));
                if tx.send((i, b)).is_err() {
                    return;
                }
            }
        });
    }
    drop(tx);
    let mut pending = BTreeMap::new();
    let mut next = 0;
    Box::new(std::iter::from_fn(move || {
        if next == total {
            return None;
        }
        loop {
            if let Some(b) = pending.remove(&next) {
                next += 1;
                return Some(b);
            }
            match rx.recv() {
                Ok((i, b)) => {
                    pending.insert(i, b);
                }
                Err(_) => {
                    next = total;
                    return Some(Err(Error::Validation("loader workers exited early".into())));
                }
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{preset, Preset};
    use crate::data::synthetic;
    use crate::taxonomy::{CountClass, SizeClass};

    fn set() -> TrainingSet {
        TrainingSet::new(synthetic::four_categories(32), &SizeThresholds::default()).unwrap()
    }

    fn recipe(k: usize) -> BatchRecipe {
        BatchRecipe {
            augment: preset(Preset::BaseBlur),
            k,
            seed: 7,
        }
    }

    #[test]
    fn shapes_for_b4_k4() {
        let b = build_batch(&set(), &recipe(4), &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(b.anchors.shape(), &[4, 3, 32, 32]);
        assert_eq!(b.masks.shape(), &[4, 1, 32, 32]);
        assert_eq!(b.positives.as_ref().unwrap().shape(), &[4, 3, 32, 32]);
        assert_eq!(b.negatives.as_ref().unwrap().shape(), &[16, 3, 32, 32]);
        assert!(b.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn negatives_respect_the_strict_constraint() {
        let s = set();
        let b = build_batch(&s, &recipe(4), &[0, 1, 2, 3], 3).unwrap();
        for (a, negs) in b.anchor_taxonomy.iter().zip(&b.negative_taxonomy) {
            assert!(negs.iter().all(|n| a.is_strict_negative(n)));
        }
        let small = b
            .anchor_taxonomy
            .iter()
            .position(|t| t.category() == (CountClass::One, SizeClass::Small));
        let negs = &b.negative_taxonomy[small.unwrap()];
        assert!(negs
            .iter()
            .all(|n| n.count_class == CountClass::Many && n.size_class != SizeClass::Small));
    }

    #[test]
    fn anchors_do_not_depend_on_k() {
        let s = set();
        let with = build_batch(&s, &recipe(4), &[2, 0, 3, 1], 11).unwrap();
        let without = build_batch(&s, &recipe(0), &[2, 0, 3, 1], 11).unwrap();
        assert_eq!(with.anchors, without.anchors);
        assert_eq!(with.masks, without.masks);
        assert!(without.negatives.is_none());
        assert_eq!(
            with,
            build_batch(&s, &recipe(4), &[2, 0, 3, 1], 11).unwrap()
        );
    }

    #[test]
    fn worker_count_does_not_change_batches() {
        let s = Arc::new(set());
        let r = Arc::new(recipe(2));
        let plan = vec![vec![0, 1], vec![2, 3], vec![3, 0]];
        let one: Vec<_> = epoch_batches(s.clone(), r.clone(), plan.clone(), 5, 1)
            .map(Result::unwrap)
            .collect();
        let three: Vec<_> = epoch_batches(s, r, plan, 5, 3)
            .map(Result::unwrap)
            .collect();
        assert_eq!(one, three);
    }

    #[test]
    fn epoch_order_is_a_permutation_and_drops_the_tail() {
        let plan = epoch_order(10, 4, 0, 2);
        assert_eq!(plan.len(), 2);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_ne!(epoch_order(10, 4, 0, 2), epoch_order(10, 4, 0, 3));
    }
}
