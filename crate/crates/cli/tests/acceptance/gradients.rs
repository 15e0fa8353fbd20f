//! Central-difference checks of every layer kind, every loss and the whole
//! tiny network.

use std::rc::Rc;

use polypseg::model::NetworkSpec;
use polypseg::netcore::{
    gradient_check, Ctx, EntryKind, GradCheckReport, Graph, LayerSpec, Mode, ParameterSet, Var,
};
use polypseg::seed;
use polypseg::trainer::network_gradcheck;
use polypseg::{Result, Tensor};
use rand::Rng;

use crate::{ensure, lib, Outcome};

const EPS: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-4;
const NETWORK_TOL: f64 = 1e-3;

fn random(shape: &[usize], seed_value: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed_value);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Inputs and layer weights are all checked. The output is reduced against
/// a fixed random weighting so that no gradient is uniform.
fn check_layer(spec: &LayerSpec, shapes: &[Vec<usize>]) -> Result<GradCheckReport> {
    let mut params = ParameterSet::new();
    let names: Vec<String> = (0..shapes.len()).map(|i| format!("in{i}")).collect();
    for (i, s) in shapes.iter().enumerate() {
        params.insert(&names[i], random(s, 10 + i as u64), EntryKind::Weight);
    }
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let weighting = random(&spec.output_shape(&refs)?, 99);
    let forward = |g: &mut Graph<f64>, p: &mut ParameterSet<f64>, init: bool| -> Result<Var<f64>> {
        let mut inputs = Vec::new();
        for n in &names {
            inputs.push(g.param(n, p.value(n)?.clone(), true));
        }
        let refs: Vec<&Var<f64>> = inputs.iter().collect();
        let mut cx = if init {
            Ctx::initializing(g, p, 7)
        } else {
            Ctx::new(g, p, Mode::Train)
        };
        let y = spec.forward(&mut cx, "layer", &refs)?;
        let r = g.constant(weighting.clone());
        let prod = g.mul(&y, &r)?;
        Ok(g.sum(&prod))
    };
    forward(&mut Graph::no_grad(), &mut params, true)?;
    gradient_check(&mut params, |g, p| forward(g, p, false), EPS, 24, 3)
}

fn layer_cases() -> Vec<(LayerSpec, Vec<Vec<usize>>)> {
    let conv = |in_ch, out_ch, kernel, stride, dilation, padding| LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        dilation,
        padding,
    };
    vec![
        (conv(2, 3, 3, 1, 1, 1), vec![vec![2, 2, 6, 6]]),
        (conv(2, 2, 3, 2, 2, 2), vec![vec![1, 2, 7, 7]]),
        (conv(3, 2, 1, 1, 1, 0), vec![vec![2, 3, 4, 4]]),
        (LayerSpec::BatchNorm { ch: 3 }, vec![vec![2, 3, 3, 3]]),
        (LayerSpec::BatchNorm { ch: 4 }, vec![vec![5, 4]]),
        (LayerSpec::Relu, vec![vec![2, 3, 4]]),
        (LayerSpec::Sigmoid, vec![vec![2, 3, 4]]),
        (
            LayerSpec::FullyConnected {
                input: 5,
                output: 3,
            },
            vec![vec![4, 5]],
        ),
        (LayerSpec::GlobalAvgPool, vec![vec![2, 3, 4, 5]]),
        (
            LayerSpec::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            vec![vec![1, 2, 6, 6]],
        ),
        (
            LayerSpec::BilinearUpsample { factor: 4 },
            vec![vec![1, 2, 3, 5]],
        ),
        (
            LayerSpec::ChannelConcat,
            vec![vec![2, 1, 3, 3], vec![2, 2, 3, 3]],
        ),
        (LayerSpec::ElementAdd, vec![vec![2, 3, 3], vec![2, 3, 3]]),
        (LayerSpec::ElementMul, vec![vec![2, 3, 3], vec![2, 3, 3]]),
    ]
}

/// Checks a loss or auxiliary op of a single trainable input `x`.
fn check_op(
    build: impl Fn(&mut Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
    shape: &[usize],
) -> Result<f64> {
    let mut params = ParameterSet::new();
    params.insert("x", random(shape, 5), EntryKind::Weight);
    let r = gradient_check(
        &mut params,
        |g, p| {
            let x = g.param("x", p.value("x")?.clone(), true);
            build(g, &x)
        },
        EPS,
        64,
        1,
    )?;
    Ok(r.max_rel_error)
}

fn loss_and_op_errors() -> Result<Vec<(&'static str, f64)>> {
    let target = Rc::new(random(&[1, 1, 8, 8], 2).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let gate = random(&[2, 3], 8).map(|v| 1.0 / (1.0 + (-v).exp()));
    let w = random(&[3, 4], 4);
    let mut out = Vec::new();

    let t = target.clone();
    out.push((
        "bce",
        check_op(move |g, x| g.bce_with_logits(x, t.clone()), &[1, 1, 8, 8])?,
    ));
    let t = target.clone();
    out.push((
        "dice",
        check_op(
            move |g, x| {
                let p = g.sigmoid(x);
                g.dice_loss(&p, t.clone(), 1.0)
            },
            &[1, 1, 8, 8],
        )?,
    ));
    out.push((
        "scale_channels",
        check_op(
            |g, x| {
                let s = g.constant(gate.clone());
                let y = g.scale_channels(x, &s)?;
                let y = g.scale(&y, 1.7);
                Ok(g.mean(&y))
            },
            &[2, 3, 2, 2],
        )?,
    ));
    out.push((
        "l2_normalize",
        check_op(
            |g, x| {
                let y = g.l2_normalize(x)?;
                let r = g.constant(w.clone());
                let y = g.mul(&y, &r)?;
                Ok(g.sum(&y))
            },
            &[3, 4],
        )?,
    ));

    let mut params = ParameterSet::new();
    params.insert("h", random(&[3, 5], 1), EntryKind::Weight);
    params.insert("hp", random(&[3, 5], 2), EntryKind::Weight);
    params.insert("hn", random(&[12, 5], 3), EntryKind::Weight);
    let r = gradient_check(
        &mut params,
        |g, p| {
            let mut unit = |name: &str| -> Result<Var<f64>> {
                let v = g.param(name, p.value(name)?.clone(), true);
                g.l2_normalize(&v)
            };
            let (h, hp, hn) = (unit("h")?, unit("hp")?, unit("hn")?);
            g.triplet_loss(&h, &hp, &hn, 1.5)
        },
        EPS,
        64,
        0,
    )?;
    out.push(("triplet", r.max_rel_error));

    // segmentation and contrastive terms together, as in training
    let mut params = ParameterSet::new();
    params.insert("z", random(&[1, 1, 8, 8], 6), EntryKind::Weight);
    params.insert("h", random(&[2, 6], 7), EntryKind::Weight);
    let unit = |t: Tensor<f64>| -> Tensor<f64> {
        let d = t.shape()[1];
        let mut v = t.data().to_vec();
        for row in v.chunks_mut(d) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.iter_mut().for_each(|a| *a /= n);
        }
        Tensor::from_vec(t.shape(), v).unwrap()
    };
    let (hp, hn) = (unit(random(&[2, 6], 8)), unit(random(&[8, 6], 9)));
    let r = gradient_check(
        &mut params,
        |g, p| {
            let z = g.param("z", p.value("z")?.clone(), true);
            let bce = g.bce_with_logits(&z, target.clone())?;
            let probs = g.sigmoid(&z);
            let dice = g.dice_loss(&probs, target.clone(), 1.0)?;
            let seg = g.add(&bce, &dice)?;
            let h = g.param("h", p.value("h")?.clone(), true);
            let h = g.l2_normalize(&h)?;
            let (pv, nv) = (g.constant(hp.clone()), g.constant(hn.clone()));
            let cl = g.triplet_loss(&h, &pv, &nv, 4.0)?;
            let cl = g.scale(&cl, 0.5);
            g.add(&seg, &cl)
        },
        EPS,
        64,
        2,
    )?;
    out.push(("hybrid", r.max_rel_error));
    Ok(out)
}

pub fn run() -> Outcome {
    let mut worst_layer = (String::new(), 0.0f64);
    let cases = layer_cases();
    for (spec, shapes) in &cases {
        let r = lib(check_layer(spec, shapes))?;
        ensure!(r.checked > 0, "{}: nothing checked", spec.name());
        ensure!(
            r.max_rel_error < LAYER_TOL,
            "{} {shapes:?}: relative error {:e} at {:?}",
            spec.name(),
            r.max_rel_error,
            r.worst
        );
        if r.max_rel_error >= worst_layer.1 {
            worst_layer = (spec.name().to_string(), r.max_rel_error);
        }
    }
    let mut worst_loss = ("", 0.0f64);
    for (name, err) in lib(loss_and_op_errors())? {
        ensure!(err < LAYER_TOL, "{name}: relative error {err:e}");
        if err >= worst_loss.1 {
            worst_loss = (name, err);
        }
    }
    let spec = NetworkSpec {
        input_size: (64, 64),
        ..NetworkSpec::tiny()
    };
    let net = lib(network_gradcheck(&spec, 3, 0))?;
    ensure!(
        net.max_rel_error < NETWORK_TOL,
        "tiny network at 64x64: relative error {:e} at {:?}",
        net.max_rel_error,
        net.worst
    );
    Ok(format!(
        "{} layer cases, worst {} {:.1e}; losses worst {} {:.1e}; network {} entries ({} at a reduced step), {:.1e}",
        cases.len(),
        worst_layer.0,
        worst_layer.1,
        worst_loss.0,
        worst_loss.1,
        net.checked,
        net.refined,
        net.max_rel_error
    ))
}
