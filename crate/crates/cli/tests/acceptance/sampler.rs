//! Negative selection never shares a count or size class with the anchor.

use std::collections::HashMap;

use polypseg::augment::{preset, Preset};
use polypseg::data::synthetic;
use polypseg::seed;
use polypseg::taxonomy::{select_negatives, CountClass, MaskTaxonomy, SizeClass, SizeThresholds};
use polypseg::trainer::{build_batch, BatchRecipe, TrainingSet};
use rand::Rng;

use crate::{ensure, lib, Outcome};

const DRAWS: usize = 1000;

fn random_record(rng: &mut impl Rng) -> MaskTaxonomy {
    let count_class = if rng.random_bool(0.5) {
        CountClass::One
    } else {
        CountClass::Many
    };
    let size_class =
        [SizeClass::Small, SizeClass::Medium, SizeClass::Large][rng.random_range(0..3)];
    MaskTaxonomy {
        count_class,
        size_class,
        area_fraction: rng.random_range(0.0..1.0),
        component_count: if count_class == CountClass::One {
            1
        } else {
            rng.random_range(2..6)
        },
    }
}

pub fn run() -> Outcome {
    let mut rng = seed::rng(4);
    let (mut draws, mut empty_pools, mut picked) = (0, 0, 0);
    while draws < DRAWS {
        let n = rng.random_range(1..40);
        let pool: Vec<(String, MaskTaxonomy)> = (0..n)
            .map(|i| (format!("s{i}"), random_record(&mut rng)))
            .collect();
        let by_id: HashMap<&str, &MaskTaxonomy> =
            pool.iter().map(|(id, t)| (id.as_str(), t)).collect();
        let anchor = random_record(&mut rng);
        let k = rng.random_range(1..9);
        let has_candidate = pool.iter().any(|(_, t)| anchor.is_strict_negative(t));
        match select_negatives(&anchor, &pool, k, rng.random()) {
            Ok(ids) => {
                ensure!(
                    has_candidate,
                    "negatives returned from a pool without candidates"
                );
                ensure!(ids.len() == k, "asked for {k}, got {}", ids.len());
                for id in &ids {
                    let t = by_id[id.as_str()];
                    ensure!(
                        t.count_class != anchor.count_class && t.size_class != anchor.size_class,
                        "violation: anchor {anchor}, negative {id} {t}"
                    );
                }
                picked += ids.len();
                draws += 1;
            }
            Err(e) => {
                ensure!(!has_candidate, "sampling failed despite candidates: {e}");
                empty_pools += 1;
            }
        }
    }

    // the same constraint through batch assembly
    let set = lib(TrainingSet::new(
        synthetic::four_categories(32),
        &SizeThresholds::default(),
    ))?;
    let recipe = BatchRecipe {
        augment: preset(Preset::None),
        k: 4,
        seed: 9,
    };
    for s in 0..50 {
        let b = lib(build_batch(&set, &recipe, &[0, 1, 2, 3], s))?;
        for (a, negs) in b.anchor_taxonomy.iter().zip(&b.negative_taxonomy) {
            ensure!(
                negs.iter().all(|n| a.is_strict_negative(n)),
                "batch {s}: anchor {a} got {negs:?}"
            );
        }
    }
    Ok(format!(
        "{DRAWS} draws, {picked} negatives, 0 violations; {empty_pools} candidate-free pools rejected; 50 batches clean"
    ))
}
