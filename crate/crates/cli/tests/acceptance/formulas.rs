//! Losses, metrics, EMA and the schedule against direct reimplementations.

use std::f64::consts::PI;
use std::rc::Rc;

use polypseg::model::momentum_update;
use polypseg::netcore::{cosine_lr, EntryKind, Graph, ParameterSet};
use polypseg::objectives::{bce_loss, dice_loss, metrics, seg_loss, total_loss, triplet_loss};
use polypseg::seed;
use polypseg::Tensor;
use rand::Rng;

use crate::{ensure, lib, Outcome};

const TOL: f64 = 1e-6;
const TRIALS: usize = 25;

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn binary(rng: &mut impl Rng, n: usize, p: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(p))).collect();
    v[0] = 1.0;
    v
}

fn oracle_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn oracle_bce(z: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..z.len() {
        let p = oracle_sigmoid(z[i]);
        s -= g[i] * p.ln() + (1.0 - g[i]) * (1.0 - p).ln();
    }
    s / z.len() as f64
}

fn oracle_dice(p: &[f64], g: &[f64], smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..p.len() {
        inter += p[i] * g[i];
        sp += p[i];
        sg += g[i];
    }
    1.0 - (2.0 * inter + smooth) / (sp + sg + smooth)
}

/// Mean over anchors of the hinge summed over that anchor's negatives.
fn oracle_triplet(h: &[Vec<f64>], hp: &[Vec<f64>], hn: &[Vec<Vec<f64>>], alpha: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s
    };
    let mut total = 0.0;
    for i in 0..h.len() {
        for n in &hn[i] {
            let v = dist(&h[i], &hp[i]) - dist(&h[i], n) + alpha;
            if v > 0.0 {
                total += v;
            }
        }
    }
    total / h.len() as f64
}

fn triplets(rng: &mut impl Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (b, k, d) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(2..9),
        );
        let alpha = rng.random_range(0.05..2.0);
        let h: Vec<Vec<f64>> = (0..b).map(|_| uniform(rng, d, -1.0, 1.0)).collect();
        let hp: Vec<Vec<f64>> = (0..b).map(|_| uniform(rng, d, -1.0, 1.0)).collect();
        let hn: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| (0..k).map(|_| uniform(rng, d, -1.0, 1.0)).collect())
            .collect();
        let want = oracle_triplet(&h, &hp, &hn, alpha);

        let per_anchor: f64 = (0..b)
            .map(|i| {
                let negs: Vec<&[f64]> = hn[i].iter().map(Vec::as_slice).collect();
                triplet_loss(&h[i], &hp[i], &negs, alpha)
            })
            .sum::<f64>()
            / b as f64;

        let mut g = Graph::<f64>::no_grad();
        let flat = |rows: Vec<&Vec<f64>>| rows.into_iter().flatten().copied().collect::<Vec<_>>();
        let hv = g.constant(lib(Tensor::from_vec(&[b, d], flat(h.iter().collect())))?);
        let pv = g.constant(lib(Tensor::from_vec(&[b, d], flat(hp.iter().collect())))?);
        let nv = g.constant(lib(Tensor::from_vec(
            &[b * k, d],
            flat(hn.iter().flatten().collect()),
        ))?);
        let graph = lib(g.triplet_loss(&hv, &pv, &nv, alpha))?.item();
        worst = worst
            .max((per_anchor - want).abs())
            .max((graph - want).abs());
    }
    ensure!(worst <= TOL, "triplet off by {worst:e}");
    Ok(format!("triplet {worst:.1e}"))
}

fn segmentation(rng: &mut impl Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = rng.random_range(4..200);
        let z = uniform(rng, n, -6.0, 6.0);
        let g = binary(rng, n, 0.4);
        let smooth = [0.0, 1.0, 1e-3][rng.random_range(0..3)];
        let p: Vec<f64> = z.iter().map(|&v| oracle_sigmoid(v)).collect();
        let (bce_o, dice_o) = (oracle_bce(&z, &g), oracle_dice(&p, &g, smooth));
        let beta = rng.random_range(0.0..2.0);
        let cl = rng.random_range(0.0..3.0);

        let bce = lib(bce_loss(&z, &g))?;
        let dice = lib(dice_loss(&p, &g, smooth))?;
        let seg = lib(seg_loss(&z, &g, smooth))?;
        let total = total_loss(seg.total(), cl, beta);

        let mut gr = Graph::<f64>::no_grad();
        let zt = gr.constant(lib(Tensor::from_vec(&[1, 1, 1, n], z.clone()))?);
        let gt = Rc::new(lib(Tensor::from_vec(&[1, 1, 1, n], g.clone()))?);
        let gb = lib(gr.bce_with_logits(&zt, gt.clone()))?.item();
        let probs = gr.sigmoid(&zt);
        let gd = lib(gr.dice_loss(&probs, gt, smooth))?.item();

        for (got, want) in [
            (bce, bce_o),
            (gb, bce_o),
            (seg.bce, bce_o),
            (dice, dice_o),
            (gd, dice_o),
            (seg.dice, dice_o),
            (total, bce_o + dice_o + beta * cl),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    ensure!(worst <= TOL, "bce/dice/hybrid off by {worst:e}");
    Ok(format!("bce/dice/hybrid {worst:.1e}"))
}

fn scores(rng: &mut impl Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let n = rng.random_range(10..400);
        let gt: Vec<u8> = binary(rng, n, 0.3).iter().map(|&v| v as u8).collect();
        let mut pred: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.35))).collect();
        pred[0] = 1;
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..n {
            match (pred[i], gt[i]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / (tp + fn_);
        let want = [
            2.0 * tp / (2.0 * tp + fp + fn_),
            tp / (tp + fp + fn_),
            precision,
            recall,
            (1.0 + 4.0) * precision * recall / (4.0 * precision + recall),
        ];
        let s = lib(metrics(&pred, &gt))?;
        let got = [s.dice, s.iou, s.precision, s.recall, s.f2];
        for i in 0..5 {
            worst = worst.max((got[i] - want[i]).abs());
        }
    }
    ensure!(worst <= TOL, "metrics off by {worst:e}");
    Ok(format!("metrics {worst:.1e}"))
}

fn ema(rng: &mut impl Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let m = rng.random_range(0.0..=1.0);
        let (mut k, mut q) = (ParameterSet::<f64>::new(), ParameterSet::<f64>::new());
        let mut expected = Vec::new();
        for t in 0..rng.random_range(1..4) {
            let n = rng.random_range(1..30);
            let (kv, qv) = (uniform(rng, n, -2.0, 2.0), uniform(rng, n, -2.0, 2.0));
            let mut e = Vec::with_capacity(n);
            for i in 0..n {
                e.push(m * kv[i] + (1.0 - m) * qv[i]);
            }
            expected.push((format!("w{t}"), e));
            k.insert(
                &format!("w{t}"),
                lib(Tensor::from_vec(&[n], kv))?,
                EntryKind::Weight,
            );
            q.insert(
                &format!("w{t}"),
                lib(Tensor::from_vec(&[n], qv))?,
                EntryKind::Weight,
            );
        }
        lib(momentum_update(&mut k, &q, m))?;
        for (name, e) in &expected {
            let got = lib(k.value(name))?.data();
            for i in 0..e.len() {
                worst = worst.max((got[i] - e[i]).abs());
            }
        }
    }
    ensure!(worst <= TOL, "EMA off by {worst:e}");
    Ok(format!("EMA {worst:.1e}"))
}

fn schedule(rng: &mut impl Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let total = rng.random_range(1..5000u64);
        let t = rng.random_range(0..=total);
        let lr0 = rng.random_range(1e-5..1e-1);
        // half-angle form of the cosine decay
        let want = lr0 * (PI * t as f64 / (2.0 * total as f64)).cos().powi(2);
        worst = worst.max((cosine_lr(t, total, lr0) - want).abs());
    }
    ensure!(worst <= TOL, "cosine schedule off by {worst:e}");
    Ok(format!("cosine {worst:.1e}"))
}

pub fn run() -> Outcome {
    let mut rng = seed::rng(20);
    let parts = [
        triplets(&mut rng)?,
        segmentation(&mut rng)?,
        scores(&mut rng)?,
        ema(&mut rng)?,
        schedule(&mut rng)?,
    ];
    Ok(format!(
        "{TRIALS} inputs each; max abs error {}",
        parts.join(", ")
    ))
}
