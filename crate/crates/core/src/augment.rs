//! Seeded augmentation for image/mask pairs and image-only views.
//!
//! Every random choice an op makes is written to a [`Geometry`] record, and
//! [`replay`] reapplies a record without touching the RNG.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::netcore::kernels::linear_taps;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewMode {
    /// Geometric ops act on image and mask alike.
    Joint,
    /// Only the image is produced.
    ImageOnly,
}

/// Image resampling used by crop-and-resize. Masks always use nearest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interp {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AugOp {
    /// Crop covering an area fraction drawn from `scale`, resized back to
    /// the input size.
    RandomResizeCrop {
        scale: (f64, f64),
        p: f64,
    },
    /// Rotation by a uniformly drawn multiple of 90 degrees (0 or 180 only
    /// for non-square inputs).
    Rotate90s {
        p: f64,
    },
    HFlip {
        p: f64,
    },
    VFlip {
        p: f64,
    },
    GaussianBlur {
        kernel: usize,
        sigma: (f64, f64),
        p: f64,
    },
    GaussianNoise {
        std: f64,
        p: f64,
    },
    ToGray {
        p: f64,
    },
    BrightnessContrast {
        limit: f64,
        p: f64,
    },
    /// Zeroes a square hole of side `ratio * unit` in every grid cell.
    GridDropout {
        ratio: f64,
        p: f64,
    },
    Normalize {
        mean: [f32; 3],
        std: [f32; 3],
    },
}

impl AugOp {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            AugOp::RandomResizeCrop { .. }
                | AugOp::Rotate90s { .. }
                | AugOp::HFlip { .. }
                | AugOp::VFlip { .. }
        )
    }

    fn probability(&self) -> f64 {
        match *self {
            AugOp::RandomResizeCrop { p, .. }
            | AugOp::Rotate90s { p }
            | AugOp::HFlip { p }
            | AugOp::VFlip { p }
            | AugOp::GaussianBlur { p, .. }
            | AugOp::GaussianNoise { p, .. }
            | AugOp::ToGray { p }
            | AugOp::BrightnessContrast { p, .. }
            | AugOp::GridDropout { p, .. } => p,
            AugOp::Normalize { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "{self:?}: probability outside [0, 1]"
            )));
        }
        match *self {
            AugOp::RandomResizeCrop {
                scale: (lo, hi), ..
            } => {
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return Err(Error::Config(format!(
                        "crop scale ({lo}, {hi}) must lie in (0, 1]"
                    )));
                }
            }
            AugOp::GaussianBlur {
                kernel,
                sigma: (lo, hi),
                ..
            } => {
                if kernel % 2 == 0 || !(lo > 0.0 && lo <= hi) {
                    return Err(Error::Config(format!(
                        "blur needs an odd kernel and 0 < sigma_lo <= sigma_hi, got {kernel}, ({lo}, {hi})"
                    )));
                }
            }
            AugOp::GaussianNoise { std, .. } if !(std >= 0.0) => {
                return Err(Error::Config(format!("noise std must be >= 0, got {std}")));
            }
            AugOp::BrightnessContrast { limit, .. } if !(0.0..1.0).contains(&limit) => {
                return Err(Error::Config(format!(
                    "brightness/contrast limit must be in [0, 1), got {limit}"
                )));
            }
            AugOp::GridDropout { ratio, .. } if !(ratio > 0.0 && ratio < 1.0) => {
                return Err(Error::Config(format!(
                    "grid dropout ratio must be in (0, 1), got {ratio}"
                )));
            }
            AugOp::Normalize { std, .. } if std.iter().any(|&v| !(v > 0.0)) => {
                return Err(Error::Config("normalize std must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub ops: Vec<AugOp>,
    pub mode: ViewMode,
    pub image_interp: Interp,
}

impl AugmentSpec {
    pub fn new(ops: Vec<AugOp>, mode: ViewMode) -> Result<Self> {
        let spec = AugmentSpec {
            ops,
            mode,
            image_interp: Interp::Bilinear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, op) in self.ops.iter().enumerate() {
            op.validate()?;
            if matches!(op, AugOp::Normalize { .. }) && i + 1 != self.ops.len() {
                return Err(Error::Config("normalize must be the last op".into()));
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: ViewMode) -> Self {
        AugmentSpec {
            mode,
            ..self.clone()
        }
    }

    /// The same spec without photometric ops (normalize excepted).
    pub fn geometric_only(&self) -> Self {
        AugmentSpec {
            ops: self
                .ops
                .iter()
                .filter(|op| op.is_geometric() || matches!(op, AugOp::Normalize { .. }))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Preset {
    Base,
    #[default]
    BaseBlur,
    BaseGray,
    BaseBc,
    BaseBlurBc,
    BaseBlurCrop06,
    BaseBlurGrid,
    /// Normalization only.
    None,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Base,
        Preset::BaseBlur,
        Preset::BaseGray,
        Preset::BaseBc,
        Preset::BaseBlurBc,
        Preset::BaseBlurCrop06,
        Preset::BaseBlurGrid,
        Preset::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::BaseBlur => "base_blur",
            Preset::BaseGray => "base_gray",
            Preset::BaseBc => "base_bc",
            Preset::BaseBlurBc => "base_blur_bc",
            Preset::BaseBlurCrop06 => "base_blur_crop06",
            Preset::BaseBlurGrid => "base_blur_grid",
            Preset::None => "none",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const NORMALIZE_HALF: AugOp = AugOp::Normalize {
    mean: [0.5; 3],
    std: [0.5; 3],
};

fn blur() -> AugOp {
    AugOp::GaussianBlur {
        kernel: 5,
        sigma: (0.1, 2.0),
        p: 0.5,
    }
}

/// Builds a preset in joint mode.
pub fn preset(p: Preset) -> AugmentSpec {
    let crop = |lo| AugOp::RandomResizeCrop {
        scale: (lo, 1.0),
        p: 1.0,
    };
    let mut ops = match p {
        Preset::None => vec![],
        Preset::BaseBlurCrop06 => vec![crop(0.6)],
        _ => vec![crop(0.8)],
    };
    if p != Preset::None {
        ops.push(AugOp::Rotate90s { p: 1.0 });
        ops.push(AugOp::VFlip { p: 0.5 });
    }
    let extra: Vec<AugOp> = match p {
        Preset::Base | Preset::None => vec![],
        Preset::BaseBlur | Preset::BaseBlurCrop06 => vec![blur()],
        Preset::BaseGray => vec![AugOp::ToGray { p: 0.5 }],
        Preset::BaseBc => vec![AugOp::BrightnessContrast { limit: 0.2, p: 0.5 }],
        Preset::BaseBlurBc => vec![blur(), AugOp::BrightnessContrast { limit: 0.2, p: 0.5 }],
        Preset::BaseBlurGrid => vec![blur(), AugOp::GridDropout { ratio: 0.3, p: 0.5 }],
    };
    ops.extend(extra);
    ops.push(NORMALIZE_HALF);
    AugmentSpec::new(ops, ViewMode::Joint).expect("presets are valid")
}

/// Parameters actually drawn by one op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Applied {
    Skipped,
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Rotate {
        k: u8,
    },
    HFlip,
    VFlip,
    Blur {
        sigma: f64,
    },
    Noise {
        seed: u64,
    },
    Gray,
    BrightnessContrast {
        alpha: f32,
        beta: f32,
    },
    GridDropout {
        unit: usize,
        hole: usize,
        dy: usize,
        dx: usize,
    },
    Normalize,
}

/// One [`Applied`] entry per op of the spec, in order.
pub type Geometry = Vec<Applied>;

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub geometry: Geometry,
}

/// Anchor and positive views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub anchor: Augmented,
    pub positive: Augmented,
}

fn draw(op: &AugOp, rng: &mut impl Rng, (h, w): (usize, usize)) -> Applied {
    if !matches!(op, AugOp::Normalize { .. }) && rng.random::<f64>() >= op.probability() {
        return Applied::Skipped;
    }
    match *op {
        AugOp::RandomResizeCrop {
            scale: (lo, hi), ..
        } => {
            let area = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let side = area.sqrt();
            let height = ((h as f64 * side).round() as usize).clamp(1, h);
            let width = ((w as f64 * side).round() as usize).clamp(1, w);
            Applied::Crop {
                top: rng.random_range(0..=h - height),
                left: rng.random_range(0..=w - width),
                height,
                width,
            }
        }
        AugOp::Rotate90s { .. } => {
            let k = if h == w {
                rng.random_range(0..4u8)
            } else {
                2 * rng.random_range(0..2u8)
            };
            Applied::Rotate { k }
        }
        AugOp::HFlip { .. } => Applied::HFlip,
        AugOp::VFlip { .. } => Applied::VFlip,
        AugOp::GaussianBlur {
            sigma: (lo, hi), ..
        } => Applied::Blur {
            sigma: if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            },
        },
        AugOp::GaussianNoise { .. } => Applied::Noise {
            seed: rng.next_u64(),
        },
        AugOp::ToGray { .. } => Applied::Gray,
        AugOp::BrightnessContrast { limit, .. } => {
            let l = limit as f32;
            let (c, b) = if l > 0.0 {
                (rng.random_range(-l..=l), rng.random_range(-l..=l))
            } else {
                (0.0, 0.0)
            };
            Applied::BrightnessContrast {
                alpha: 1.0 + c,
                beta: b,
            }
        }
        AugOp::GridDropout { ratio, .. } => {
            let lo = (h.min(w) / 10).max(2);
            let hi = (h.min(w) / 4).max(lo);
            let unit = rng.random_range(lo..=hi);
            let hole = ((unit as f64 * ratio).round() as usize).clamp(1, unit - 1);
            Applied::GridDropout {
                unit,
                hole,
                dy: rng.random_range(0..=unit - hole),
                dx: rng.random_range(0..=unit - hole),
            }
        }
        AugOp::Normalize { .. } => Applied::Normalize,
    }
}

/// Applies `spec` with randomness drawn from `seed`.
pub fn apply(spec: &AugmentSpec, sample: &ImageSample, seed_value: u64) -> Result<Augmented> {
    run(spec, sample, Source::Rng(seed::rng(seed_value)))
}

/// Reapplies a previously drawn record.
pub fn replay(spec: &AugmentSpec, sample: &ImageSample, geometry: &Geometry) -> Result<Augmented> {
    if geometry.len() != spec.ops.len() {
        return Err(Error::Validation(format!(
            "record has {} entries for {} ops",
            geometry.len(),
            spec.ops.len()
        )));
    }
    run(spec, sample, Source::Record(geometry))
}

/// Anchor in the spec's mode, positive as an independent image-only draw.
pub fn view_pair(spec: &AugmentSpec, sample: &ImageSample, seed_value: u64) -> Result<ViewPair> {
    Ok(ViewPair {
        anchor: apply(spec, sample, seed::derive(seed_value, "anchor"))?,
        positive: apply(
            &spec.with_mode(ViewMode::ImageOnly),
            sample,
            seed::derive(seed_value, "positive"),
        )?,
    })
}

enum Source<'a> {
    Rng(rand_chacha::ChaCha8Rng),
    Record(&'a Geometry),
}

fn run(spec: &AugmentSpec, sample: &ImageSample, mut source: Source<'_>) -> Result<Augmented> {
    spec.validate()?;
    let mut image = sample.image.clone();
    let mut mask = match spec.mode {
        ViewMode::Joint => Some(sample.mask.clone()),
        ViewMode::ImageOnly => None,
    };
    let mut geometry = Vec::with_capacity(spec.ops.len());
    for (i, op) in spec.ops.iter().enumerate() {
        let (h, w, _) = image.dim();
        let applied = match &mut source {
            Source::Rng(rng) => draw(op, rng, (h, w)),
            Source::Record(g) => g[i].clone(),
        };
        apply_one(op, &applied, spec.image_interp, &mut image, &mut mask)?;
        geometry.push(applied);
    }
    Ok(Augmented {
        image,
        mask,
        geometry,
    })
}

fn mismatch(op: &AugOp, applied: &Applied) -> Error {
    Error::Validation(format!(
        "record entry {applied:?} does not belong to {op:?}"
    ))
}

fn apply_one(
    op: &AugOp,
    applied: &Applied,
    interp: Interp,
    image: &mut Array3<f32>,
    mask: &mut Option<Array2<u8>>,
) -> Result<()> {
    let (h, w, _) = image.dim();
    match (op, applied) {
        (_, Applied::Skipped) => {}
        (
            AugOp::RandomResizeCrop { .. },
            &Applied::Crop {
                top,
                left,
                height,
                width,
            },
        ) => {
            if top + height > h || left + width > w || height == 0 || width == 0 {
                return Err(Error::Validation(format!(
                    "crop {applied:?} outside {h}x{w}"
                )));
            }
            let crop = image.slice(s![top..top + height, left..left + width, ..]);
            *image = match interp {
                Interp::Bilinear => resize_bilinear(crop, (h, w)),
                Interp::Nearest => resize_nearest3(crop, (h, w)),
            };
            if let Some(m) = mask {
                *m = resize_nearest2(m.slice(s![top..top + height, left..left + width]), (h, w));
            }
        }
        (AugOp::Rotate90s { .. }, &Applied::Rotate { k }) => {
            if h != w && k % 2 == 1 {
                return Err(Error::Validation(
                    "quarter turn of a non-square image".into(),
                ));
            }
            *image = rot90_3(image.view(), k);
            if let Some(m) = mask {
                *m = rot90_2(m.view(), k);
            }
        }
        (AugOp::HFlip { .. }, Applied::HFlip) => {
            *image = image.slice(s![.., ..;-1, ..]).to_owned();
            if let Some(m) = mask {
                *m = m.slice(s![.., ..;-1]).to_owned();
            }
        }
        (AugOp::VFlip { .. }, Applied::VFlip) => {
            *image = image.slice(s![..;-1, .., ..]).to_owned();
            if let Some(m) = mask {
                *m = m.slice(s![..;-1, ..]).to_owned();
            }
        }
        (&AugOp::GaussianBlur { kernel, .. }, &Applied::Blur { sigma }) => {
            *image = gaussian_blur(image.view(), kernel, sigma);
        }
        (&AugOp::GaussianNoise { std, .. }, &Applied::Noise { seed }) => {
            if std > 0.0 {
                let normal =
                    Normal::new(0.0, std as f32).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = seed::rng(seed);
                image.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
        (AugOp::ToGray { .. }, Applied::Gray) => {
            for mut px in image.lanes_mut(Axis(2)) {
                let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                px.fill(y);
            }
        }
        (AugOp::BrightnessContrast { .. }, &Applied::BrightnessContrast { alpha, beta }) => {
            image.mapv_inplace(|v| (alpha * v + beta).clamp(0.0, 1.0));
        }
        (AugOp::GridDropout { .. }, &Applied::GridDropout { unit, hole, dy, dx }) => {
            if unit == 0 {
                return Err(Error::Validation("grid unit must be positive".into()));
            }
            for ((r, c, _), v) in image.indexed_iter_mut() {
                let (ry, cx) = (r % unit, c % unit);
                if ry >= dy && ry < dy + hole && cx >= dx && cx < dx + hole {
                    *v = 0.0;
                }
            }
        }
        (AugOp::Normalize { mean, std }, Applied::Normalize) => {
            for mut px in image.lanes_mut(Axis(2)) {
                for c in 0..3 {
                    px[c] = (px[c] - mean[c]) / std[c];
                }
            }
        }
        _ => return Err(mismatch(op, applied)),
    }
    Ok(())
}

fn rot90_3(a: ArrayView3<'_, f32>, k: u8) -> Array3<f32> {
    match k % 4 {
        0 => a.to_owned(),
        1 => a
            .permuted_axes([1, 0, 2])
            .slice_move(s![..;-1, .., ..])
            .as_standard_layout()
            .into_owned(),
        2 => a
            .slice_move(s![..;-1, ..;-1, ..])
            .as_standard_layout()
            .into_owned(),
        _ => a
            .permuted_axes([1, 0, 2])
            .slice_move(s![.., ..;-1, ..])
            .as_standard_layout()
            .into_owned(),
    }
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rot90_2<T: Clone>(a: ArrayView2<'_, T>, k: u8) -> Array2<T> {
    match k % 4 {
        0 => a.to_owned(),
        1 => a
            .reversed_axes()
            .slice_move(s![..;-1, ..])
            .as_standard_layout()
            .into_owned(),
        2 => a
            .slice_move(s![..;-1, ..;-1])
            .as_standard_layout()
            .into_owned(),
        _ => a
            .reversed_axes()
            .slice_move(s![.., ..;-1])
            .as_standard_layout()
            .into_owned(),
    }
}

/// Half-pixel nearest source index.
fn nearest_index(o: usize, n_in: usize, n_out: usize) -> usize {
    (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
}

fn resize_nearest2(a: ArrayView2<'_, u8>, (ho, wo): (usize, usize)) -> Array2<u8> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((ho, wo), |(r, c)| {
        a[(nearest_index(r, h, ho), nearest_index(c, w, wo))]
    })
}

fn resize_nearest3(a: ArrayView3<'_, f32>, (ho, wo): (usize, usize)) -> Array3<f32> {
    let (h, w, ch) = a.dim();
    Array3::from_shape_fn((ho, wo, ch), |(r, c, k)| {
        a[(nearest_index(r, h, ho), nearest_index(c, w, wo), k)]
    })
}

fn resize_bilinear(a: ArrayView3<'_, f32>, (ho, wo): (usize, usize)) -> Array3<f32> {
    let (h, w, ch) = a.dim();
    let ty = linear_taps(h, ho);
    let tx = linear_taps(w, wo);
    Array3::from_shape_fn((ho, wo, ch), |(r, c, k)| {
        let (y0, y1, fy) = ty[r];
        let (x0, x1, fx) = tx[c];
        let (fy, fx) = (fy as f32, fx as f32);
        let top = a[(y0, x0, k)] * (1.0 - fx) + a[(y0, x1, k)] * fx;
        let bottom = a[(y1, x0, k)] * (1.0 - fx) + a[(y1, x1, k)] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(a: ArrayView3<'_, f32>, kernel: usize, sigma: f64) -> Array3<f32> {
    let r = (kernel / 2) as isize;
    let weights: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|v| (v / total) as f32).collect();
    let (h, w, ch) = a.dim();
    let rows: Array3<f32> = Array3::from_shape_fn((h, w, ch), |(y, x, k)| {
        (-r..=r)
            .zip(&weights)
            .map(|(d, &wt)| wt * a[(y, reflect(x as isize + d, w), k)])
            .sum()
    });
    Array3::from_shape_fn((h, w, ch), |(y, x, k)| {
        (-r..=r)
            .zip(&weights)
            .map(|(d, &wt)| wt * rows[(reflect(y as isize + d, h), x, k)])
            .sum()
    })
}
