//! Momentum encoder initialization, EMA endpoints, contraction and gradient
//! isolation.

use polypseg::augment::{preset, Preset};
use polypseg::data::synthetic;
use polypseg::model::{Model, NetworkSpec, PROJECTION, QUERY_ENCODER};
use polypseg::netcore::{EntryKind, ParameterSet};
use polypseg::objectives::LossConfig;
use polypseg::seed;
use polypseg::taxonomy::SizeThresholds;
use polypseg::trainer::{
    build_batch, train_step, BatchRecipe, NoObserver, TrainState, TrainingSet,
};
use rand::Rng;

use crate::{ensure, lib, Outcome};

const CONTRACTION_TOL: f64 = 1e-7;

fn model(m: f64) -> Result<Model<f64>, String> {
    lib(Model::new(
        NetworkSpec {
            input_size: (32, 32),
            momentum: m,
            ..NetworkSpec::tiny()
        },
        11,
    ))
}

fn momentum(model: &Model<f64>) -> Result<&ParameterSet<f64>, String> {
    model
        .momentum
        .as_ref()
        .ok_or_else(|| "no momentum encoder".to_string())
}

/// `max |theta_k - theta_q|` over momentum weights.
fn gap(model: &Model<f64>) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (name, k) in momentum(model)?.iter() {
        if k.kind != EntryKind::Weight {
            continue;
        }
        let q = lib(model.online.value(name))?;
        for (a, b) in k.value.data().iter().zip(q.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn perturb_online(model: &mut Model<f64>, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    for (_, e) in model.online.iter_mut() {
        if e.kind == EntryKind::Weight {
            for v in e.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
}

fn initialization() -> Result<usize, String> {
    let m = model(0.999)?;
    let k = momentum(&m)?;
    ensure!(!k.is_empty(), "empty momentum encoder");
    for (name, e) in k.iter() {
        ensure!(
            name.starts_with(QUERY_ENCODER) || name.starts_with(PROJECTION),
            "unexpected momentum entry {name}"
        );
        let q = lib(m.online.value(name))?;
        ensure!(
            &e.value == q,
            "{name} differs from the query encoder at init"
        );
    }
    let shared = m
        .online
        .names()
        .filter(|n| n.starts_with(QUERY_ENCODER) || n.starts_with(PROJECTION))
        .count();
    ensure!(
        shared == k.len(),
        "{} momentum entries for {shared} online ones",
        k.len()
    );
    Ok(k.len())
}

fn endpoints() -> Result<(), String> {
    let mut frozen = model(1.0)?;
    perturb_online(&mut frozen, 1);
    let before = momentum(&frozen)?.clone();
    for _ in 0..3 {
        lib(frozen.momentum_step())?;
    }
    for (name, e) in momentum(&frozen)?.iter() {
        ensure!(
            e.value == before.get(name).unwrap().value,
            "m=1 changed {name}"
        );
    }

    let mut copy = model(0.0)?;
    perturb_online(&mut copy, 2);
    ensure!(gap(&copy)? > 0.0, "perturbation had no effect");
    lib(copy.momentum_step())?;
    for (name, e) in momentum(&copy)?.iter() {
        if e.kind == EntryKind::Weight {
            ensure!(
                &e.value == lib(copy.online.value(name))?,
                "m=0 did not copy {name}"
            );
        }
    }
    Ok(())
}

fn contraction() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (i, m) in [0.5, 0.9, 0.99, 0.999].into_iter().enumerate() {
        let mut net = model(m)?;
        perturb_online(&mut net, 10 + i as u64);
        let mut prev = gap(&net)?;
        for _ in 0..6 {
            lib(net.momentum_step())?;
            let now = gap(&net)?;
            worst = worst.max((now - m * prev).abs());
            prev = now;
        }
    }
    ensure!(
        worst <= CONTRACTION_TOL,
        "gap deviates from geometric decay by {worst:e}"
    );
    Ok(worst)
}

fn isolation() -> Result<usize, String> {
    let m = 0.9;
    let set = lib(TrainingSet::new(
        synthetic::four_categories(32),
        &SizeThresholds::default(),
    ))?;
    let recipe = BatchRecipe {
        augment: preset(Preset::BaseBlur),
        k: 2,
        seed: 3,
    };
    let mut state = TrainState::new(model(m)?);
    let mut checked = 0;
    for step in 0..3 {
        let batch = lib(build_batch(&set, &recipe, &[0, 1, 2, 3], step))?;
        let before = momentum(&state.model)?.clone();
        lib(train_step(
            &mut state,
            &batch,
            &LossConfig::default(),
            1e-3,
            step,
            &mut NoObserver,
        ))?;
        for (name, e) in momentum(&state.model)?.iter() {
            ensure!(
                e.grad.data().iter().all(|&g| g == 0.0),
                "step {step}: nonzero gradient in momentum {name}"
            );
            if e.kind != EntryKind::Weight {
                continue;
            }
            // the only change is the EMA towards the updated online weights
            let q = lib(state.model.online.value(name))?;
            let k0 = &before.get(name).unwrap().value;
            for ((&k1, &k0), &q) in e.value.data().iter().zip(k0.data()).zip(q.data()) {
                let want = m * k0 + (1.0 - m) * q;
                ensure!(
                    (k1 - want).abs() <= 1e-12,
                    "step {step}: {name} moved by more than the EMA"
                );
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn run() -> Outcome {
    let entries = initialization()?;
    endpoints()?;
    let worst = contraction()?;
    let checked = isolation()?;
    Ok(format!(
        "{entries} entries copied at init; m=1 and m=0 exact; contraction error {worst:.1e}; \
         zero momentum gradients over 3 steps ({checked} weight checks)"
    ))
}
