//! Joint augmentation moves the mask exactly as it moves the image.

use polypseg::augment::{apply, preset, replay, AugOp, Augmented, Interp, Preset};
use polypseg::data::ImageSample;
use polypseg::ndarray::{Array2, Array3};
use polypseg::seed;
use rand::Rng;

use crate::{ensure, lib, Outcome};

const APPLICATIONS: usize = 200;

fn random_sample(rng: &mut impl Rng, id: usize) -> Result<ImageSample, String> {
    let (h, w) = if rng.random_bool(0.25) {
        (40, 56)
    } else {
        let s = 8 * rng.random_range(3..9);
        (s, s)
    };
    let mut mask = Array2::<u8>::zeros((h, w));
    for _ in 0..rng.random_range(1..4) {
        let (bh, bw) = (rng.random_range(2..h / 2), rng.random_range(2..w / 2));
        let (r, c) = (rng.random_range(0..h - bh), rng.random_range(0..w - bw));
        mask.slice_mut(polypseg::ndarray::s![r..r + bh, c..c + bw])
            .fill(1);
    }
    let image = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0f32));
    lib(ImageSample::new(format!("a{id}"), image, mask))
}

/// The mask read back from an image whose every channel holds the mask,
/// after normalization to [-1, 1].
fn mask_of(a: &Augmented) -> Array2<u8> {
    a.image
        .index_axis(polypseg::ndarray::Axis(2), 0)
        .mapv(|v| u8::from(v > 0.0))
}

pub fn run() -> Outcome {
    let mut rng = seed::rng(5);
    let presets: Vec<Preset> = Preset::ALL
        .into_iter()
        .filter(|p| *p != Preset::None)
        .collect();
    let mut transformed = 0;
    for i in 0..APPLICATIONS {
        let p = presets[i % presets.len()];
        let spec = preset(p);
        let sample = random_sample(&mut rng, i)?;
        let s = rng.random();
        let out = lib(apply(&spec, &sample, s))?;
        let mask = out.mask.as_ref().ok_or("joint view without a mask")?;
        ensure!(
            mask.iter().all(|&v| v <= 1),
            "{p}: non-binary mask value after augmentation"
        );
        ensure!(
            mask.dim() == (out.image.dim().0, out.image.dim().1),
            "{p}: mask {:?} vs image {:?}",
            mask.dim(),
            out.image.dim()
        );

        // Replay the drawn geometry on an image that is the mask itself.
        let mut geo_spec = spec.geometric_only();
        geo_spec.image_interp = Interp::Nearest;
        let geometry: Vec<_> = spec
            .ops
            .iter()
            .zip(&out.geometry)
            .filter(|(op, _)| op.is_geometric() || matches!(op, AugOp::Normalize { .. }))
            .map(|(_, g)| g.clone())
            .collect();
        let as_image = sample.mask.mapv(f32::from);
        let painted = lib(ImageSample::new(
            "painted",
            Array3::from_shape_fn((as_image.nrows(), as_image.ncols(), 3), |(r, c, _)| {
                as_image[(r, c)]
            }),
            sample.mask.clone(),
        ))?;
        let replayed = lib(replay(&geo_spec, &painted, &geometry))?;
        ensure!(
            mask_of(&replayed) == mask,
            "{p} (seed {s}): mask differs from the transformed mask image"
        );
        // and drawing afresh with the same seed takes the same path
        let direct = lib(apply(&geo_spec, &painted, s))?;
        ensure!(
            direct.mask.as_ref() == Some(&mask_of(&direct)),
            "{p} (seed {s}): geometric-only view disagrees with its own image"
        );
        if out.geometry.iter().any(|g| {
            !matches!(
                g,
                polypseg::augment::Applied::Skipped | polypseg::augment::Applied::Normalize
            )
        }) {
            transformed += 1;
        }
    }
    Ok(format!(
        "{APPLICATIONS} joint applications over {} presets ({transformed} with geometric changes): \
         masks bit-exact and binary",
        presets.len()
    ))
}
