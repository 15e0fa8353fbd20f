//! Projection MLP, MASPP, skip fusion and the segmentation head.

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::netcore::{ConvGeom, Ctx, Var};
use crate::tensor::Element;

const PW: ConvGeom = ConvGeom {
    stride: 1,
    padding: 0,
    dilation: 1,
};
const SAME3: ConvGeom = ConvGeom {
    stride: 1,
    padding: 1,
    dilation: 1,
};

/// Linear, BN, ReLU, linear, then L2 normalization of each row.
pub fn project<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    pooled: &Var<T>,
) -> Result<Var<T>> {
    let c5 = spec.backbone.high_level_channels();
    if pooled.shape().len() != 2 || pooled.shape()[1] != c5 {
        return Err(Error::shape(
            "projection",
            format!("expected [B, {c5}], got {:?}", pooled.shape()),
        ));
    }
    let p = spec.projection_dim;
    let y = cx.linear("projection/fc1", pooled, p, true)?;
    let y = cx.batch_norm("projection/bn", &y)?;
    let y = cx.relu(&y);
    let y = cx.linear("projection/fc2", &y, p, true)?;
    cx.graph
        .l2_normalize(&y)
        .map_err(|e| e.in_layer("projection"))
}

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3
/// branches, an image-pool branch, concatenated and reduced by a 1x1 conv.
pub fn aspp<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    path: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let ch = spec.maspp_channels;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut branches = vec![cx.conv_bn_relu(&format!("{path}/b0"), x, ch, 1, PW)?];
    for (i, &r) in spec.aspp_rates.iter().enumerate() {
        let g = ConvGeom::new(1, r, r);
        branches.push(cx.conv_bn_relu(&format!("{path}/b{}", i + 1), x, ch, 3, g)?);
    }
    let pooled = cx.graph.global_avg_pool(x)?;
    let pooled = cx.graph.reshape(&pooled, &[b, c, 1, 1])?;
    let pooled = cx.conv_bn_relu(&format!("{path}/pool"), &pooled, ch, 1, PW)?;
    branches.push(cx.graph.upsample_bilinear(&pooled, (h, w))?);
    let refs: Vec<&Var<T>> = branches.iter().collect();
    let cat = cx.graph.concat_channels(&refs)?;
    cx.conv_bn_relu(&format!("{path}/project"), &cat, ch, 1, PW)
}

/// Squeeze-and-excitation gate: `x * sigmoid(fc2(relu(fc1(gap(x)))))`.
pub fn se_reweight<T: Element>(
    cx: &mut Ctx<'_, T>,
    path: &str,
    x: &Var<T>,
    reduction: usize,
) -> Result<Var<T>> {
    let c = x.shape()[1];
    if reduction == 0 || !c.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "{c} channels not divisible by SE reduction {reduction}"
        )));
    }
    let s = cx.graph.global_avg_pool(x)?;
    let s = cx.linear(&format!("{path}/fc1"), &s, c / reduction, true)?;
    let s = cx.relu(&s);
    let s = cx.linear(&format!("{path}/fc2"), &s, c, true)?;
    let gate = cx.graph.sigmoid(&s);
    cx.graph.scale_channels(x, &gate)
}

/// High-level fusion. With `use_maspp` the ASPP output is concatenated with
/// a plain 3x3 branch, merged by a 1x1 conv and reweighted by SE; otherwise
/// the ASPP output is returned as is.
pub fn maspp<T: Element>(cx: &mut Ctx<'_, T>, spec: &NetworkSpec, f5: &Var<T>) -> Result<Var<T>> {
    let a = aspp(cx, spec, "decoder/aspp", f5)?;
    if !spec.use_maspp {
        return Ok(a);
    }
    let ch = spec.maspp_channels;
    let b = cx.conv_bn_relu("decoder/maspp/plain", f5, ch, 3, SAME3)?;
    let cat = cx.graph.concat_channels(&[&a, &b])?;
    let fused = cx.conv_bn_relu("decoder/maspp/fuse", &cat, ch, 1, PW)?;
    se_reweight(cx, "decoder/maspp/se", &fused, spec.se_reduction)
}

/// Skip fusion `A + conv3x3(concat(B, z))` with `A`, `B` two 1x1
/// projections of the low-level map `f2`.
pub fn ca_fuse<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    f2: &Var<T>,
    z: &Var<T>,
) -> Result<Var<T>> {
    if f2.shape().len() != 4
        || z.shape().len() != 4
        || f2.shape()[2..] != z.shape()[2..]
        || f2.shape()[0] != z.shape()[0]
    {
        return Err(Error::shape(
            "ca_fuse",
            format!("f2 {:?} vs z {:?}", f2.shape(), z.shape()),
        ));
    }
    let d = spec.decoder_channels;
    let a = cx.conv("decoder/ca/a/conv", f2, d, 1, PW, false)?;
    let a = cx.batch_norm("decoder/ca/a/bn", &a)?;
    let b = cx.conv_bn_relu("decoder/ca/b", f2, spec.low_level_reduced, 1, PW)?;
    let cat = cx.graph.concat_channels(&[&b, z])?;
    let c = cx.conv_bn_relu("decoder/ca/fuse", &cat, d, 3, SAME3)?;
    cx.graph.add(&a, &c)
}

/// Skip fusion without the additive path: concat of the reduced low-level
/// map and `z`, then two 3x3 conv-BN-ReLU layers.
pub fn concat_fuse<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    f2: &Var<T>,
    z: &Var<T>,
) -> Result<Var<T>> {
    if f2.shape()[2..] != z.shape()[2..] {
        return Err(Error::shape(
            "concat_fuse",
            format!("f2 {:?} vs z {:?}", f2.shape(), z.shape()),
        ));
    }
    let d = spec.decoder_channels;
    let low = cx.conv_bn_relu("decoder/low", f2, spec.low_level_reduced, 1, PW)?;
    let cat = cx.graph.concat_channels(&[z, &low])?;
    let y = cx.conv_bn_relu("decoder/refine1", &cat, d, 3, SAME3)?;
    cx.conv_bn_relu("decoder/refine2", &y, d, 3, SAME3)
}

/// Upsamples the fused feature to stride 4, fuses it with `f2`, maps to one
/// logit channel and upsamples to the input size.
pub fn decode<T: Element>(
    cx: &mut Ctx<'_, T>,
    spec: &NetworkSpec,
    fused: &Var<T>,
    f2: &Var<T>,
) -> Result<Var<T>> {
    let (h2, w2) = (f2.shape()[2], f2.shape()[3]);
    let z = cx.graph.upsample_bilinear(fused, (h2, w2))?;
    let y = if spec.use_ca {
        ca_fuse(cx, spec, f2, &z)?
    } else {
        concat_fuse(cx, spec, f2, &z)?
    };
    // 1x1 conv and bilinear resize commute, so the cheaper order is used
    let logits = cx.conv("decoder/out", &y, 1, 1, PW, true)?;
    cx.graph.upsample_bilinear(
        &logits,
        (h2 * spec.low_level_stride, w2 * spec.low_level_stride),
    )
}
