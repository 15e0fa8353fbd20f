//! Encoders producing the stride-4 and stride-16 feature maps.
//!
//! Parameter names follow torchvision's ResNet (`layer1/0/conv1/weight`,
//! `layer1/0/downsample/1/running_mean`, ...) with `/` for `.`, so
//! pretrained weights map over by a character substitution.

use super::spec::{Backbone, NetworkSpec};
use crate::error::{Error, Result};
use crate::netcore::{ConvGeom, Ctx, Var};
use crate::tensor::Element;

pub struct EncoderFeatures<T> {
    /// Low-level map, stride 4.
    pub f2: Var<T>,
    /// High-level map, stride 16.
    pub f5: Var<T>,
    /// Global average pool of `f5`.
    pub pooled: Var<T>,
}

fn conv_bn<T: Element>(
    cx: &mut Ctx<'_, T>,
    conv: &str,
    bn: &str,
    x: &Var<T>,
    out: usize,
    k: usize,
    geom: ConvGeom,
) -> Result<Var<T>> {
    let y = cx.conv(conv, x, out, k, geom, false)?;
    cx.batch_norm(bn, &y)
}

fn residual<T: Element>(cx: &mut Ctx<'_, T>, y: &Var<T>, shortcut: &Var<T>) -> Result<Var<T>> {
    let s = cx.graph.add(y, shortcut)?;
    Ok(cx.relu(&s))
}

fn downsample<T: Element>(
    cx: &mut Ctx<'_, T>,
    p: &str,
    x: &Var<T>,
    out: usize,
    stride: usize,
) -> Result<Var<T>> {
    if stride == 1 && x.shape()[1] == out {
        return Ok(x.clone());
    }
    conv_bn(
        cx,
        &format!("{p}/downsample/0"),
        &format!("{p}/downsample/1"),
        x,
        out,
        1,
        ConvGeom::new(stride, 0, 1),
    )
}

fn basic_block<T: Element>(
    cx: &mut Ctx<'_, T>,
    p: &str,
    x: &Var<T>,
    out: usize,
    stride: usize,
) -> Result<Var<T>> {
    let y = conv_bn(
        cx,
        &format!("{p}/conv1"),
        &format!("{p}/bn1"),
        x,
        out,
        3,
        ConvGeom::new(stride, 1, 1),
    )?;
    let y = cx.relu(&y);
    let y = conv_bn(
        cx,
        &format!("{p}/conv2"),
        &format!("{p}/bn2"),
        &y,
        out,
        3,
        ConvGeom::new(1, 1, 1),
    )?;
    let sc = downsample(cx, p, x, out, stride)?;
    residual(cx, &y, &sc)
}

fn bottleneck<T: Element>(
    cx: &mut Ctx<'_, T>,
    p: &str,
    x: &Var<T>,
    width: usize,
    stride: usize,
    dilation: usize,
) -> Result<Var<T>> {
    let out = width * 4;
    let y = conv_bn(
        cx,
        &format!("{p}/conv1"),
        &format!("{p}/bn1"),
        x,
        width,
        1,
        ConvGeom::new(1, 0, 1),
    )?;
    let y = cx.relu(&y);
    let g = ConvGeom::new(stride, dilation, dilation);
    let y = conv_bn(
        cx,
        &format!("{p}/conv2"),
        &format!("{p}/bn2"),
        &y,
        width,
        3,
        g,
    )?;
    let y = cx.relu(&y);
    let y = conv_bn(
        cx,
        &format!("{p}/conv3"),
        &format!("{p}/bn3"),
        &y,
        out,
        1,
        ConvGeom::new(1, 0, 1),
    )?;
    let sc = downsample(cx, p, x, out, stride)?;
    residual(cx, &y, &sc)
}

fn tiny<T: Element>(cx: &mut Ctx<'_, T>, prefix: &str, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let y = conv_bn(
        cx,
        &format!("{prefix}/conv1"),
        &format!("{prefix}/bn1"),
        x,
        16,
        3,
        ConvGeom::new(2, 1, 1),
    )?;
    let y = cx.relu(&y);
    let y = basic_block(cx, &format!("{prefix}/layer1/0"), &y, 16, 1)?;
    let f2 = basic_block(cx, &format!("{prefix}/layer2/0"), &y, 32, 2)?;
    let y = basic_block(cx, &format!("{prefix}/layer3/0"), &f2, 64, 2)?;
    let f5 = basic_block(cx, &format!("{prefix}/layer4/0"), &y, 128, 2)?;
    Ok((f2, f5))
}

fn resnet50<T: Element>(cx: &mut Ctx<'_, T>, prefix: &str, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let y = conv_bn(
        cx,
        &format!("{prefix}/conv1"),
        &format!("{prefix}/bn1"),
        x,
        64,
        7,
        ConvGeom::new(2, 3, 1),
    )?;
    let y = cx.relu(&y);
    let mut y = cx.graph.max_pool2d(&y, 3, ConvGeom::new(2, 1, 1))?;
    let mut f2 = None;
    // (blocks, width, stride, dilation of blocks after the first)
    let stages = [
        (3, 64, 1, 1),
        (4, 128, 2, 1),
        (6, 256, 2, 1),
        (3, 512, 1, 2),
    ];
    for (li, &(blocks, width, stride, dilation)) in stages.iter().enumerate() {
        for b in 0..blocks {
            let p = format!("{prefix}/layer{}/{b}", li + 1);
            let (s, d) = if b == 0 { (stride, 1) } else { (1, dilation) };
            y = bottleneck(cx, &p, &y, width, s, d)?;
        }
        if li == 0 {
            f2 = Some(y.clone());
        }
    }
    Ok((f2.expect("first stage ran"), y))
}

/// Runs the backbone of `spec` with parameters under `prefix`.
pub fn encode<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    prefix: &str,
    x: &Var<T>,
) -> Result<EncoderFeatures<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != spec.input_size {
        return Err(Error::shape(
            "encode",
            format!(
                "expected [B, 3, {}, {}], got {s:?}",
                spec.input_size.0, spec.input_size.1
            ),
        ));
    }
    let (f2, f5) = match spec.backbone {
        Backbone::Tiny => tiny(cx, prefix, x)?,
        Backbone::ResNet50 => resnet50(cx, prefix, x)?,
    };
    let pooled = cx.graph.global_avg_pool(&f5)?;
    Ok(EncoderFeatures { f2, f5, pooled })
}
