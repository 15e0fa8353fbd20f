//! End-to-end gradient check of the full network and hybrid loss.

use std::rc::Rc;

use rand::Rng;

use crate::augment::{apply, preset, Preset};
use crate::data::synthetic;
use crate::error::{Error, Result};
use crate::model::{forward_online, to_nchw, Model, NetworkSpec};
use crate::netcore::{gradient_check, Ctx, GradCheckReport, Mode};
use crate::objectives::LossConfig;
use crate::seed;
use crate::tensor::Tensor;

/// Central-difference check of every trainable tensor of `spec` (sampled
/// entries) through segmentation and contrastive losses, in double
/// precision, on a batch of two generated images.
pub fn network_gradcheck(
    spec: &NetworkSpec,
    samples_per_param: usize,
    seed_value: u64,
) -> Result<GradCheckReport> {
    let (h, w) = spec.input_size;
    if h != w || h % 8 != 0 {
        return Err(Error::Config(
            "gradient check needs a square input size divisible by 8".into(),
        ));
    }
    let norm = preset(Preset::None);
    let samples = synthetic::four_categories(h);
    let views = [
        apply(&norm, &samples[0], 0)?.image,
        apply(&norm, &samples[1], 0)?.image,
    ];
    let x: Tensor<f64> = to_nchw(&[views[0].view(), views[1].view()])?;
    let masks: Vec<f64> = samples[..2]
        .iter()
        .flat_map(|s| s.mask.iter().map(|&v| f64::from(v)))
        .collect();
    let target = Rc::new(Tensor::from_vec(&[2, 1, h, w], masks)?);

    let loss_cfg = LossConfig::default();
    let d = spec.projection_dim;
    let mut rng = seed::rng_for(seed_value, "gradcheck/keys");
    let mut unit_rows = |n: usize| -> Result<Tensor<f64>> {
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::from_vec(&[n, d], data)
    };
    let hp = unit_rows(2)?;
    let hn = unit_rows(2 * loss_cfg.k)?;

    let mut model = Model::<f64>::new(spec.clone(), seed_value)?;
    let spec = model.spec.clone();
    gradient_check(
        &mut model.online,
        |g, p| {
            let xv = g.constant(x.clone());
            let mut cx = Ctx::new(g, p, Mode::Train);
            let out = forward_online(&mut cx, &spec, &xv)?;
            let bce = g.bce_with_logits(&out.logits, target.clone())?;
            let probs = g.sigmoid(&out.logits);
            let dice = g.dice_loss(&probs, target.clone(), loss_cfg.dice_smooth)?;
            let mut total = g.add(&bce, &dice)?;
            if let Some(emb) = &out.embedding {
                let (p, n) = (g.constant(hp.clone()), g.constant(hn.clone()));
                // a wide margin keeps every hinge active
                let cl = g.triplet_loss(emb, &p, &n, 4.0)?;
                let cl = g.scale(&cl, loss_cfg.beta);
                total = g.add(&total, &cl)?;
            }
            Ok(total)
        },
        1e-5,
        samples_per_param,
        seed_value,
    )
}
