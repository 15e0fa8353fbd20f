//! Mask-derived polyp categories and contrastive negative sampling.
//!
//! A mask falls into one of six categories: the number of connected
//! foreground components (one or many) crossed with the foreground area
//! fraction (small, medium or large).

use std::collections::VecDeque;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountClass {
    One,
    Many,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl CountClass {
    pub const ALL: [CountClass; 2] = [CountClass::One, CountClass::Many];

    pub fn as_str(self) -> &'static str {
        match self {
            CountClass::One => "one",
            CountClass::Many => "many",
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!(
                "connectivity must be 4 or 8, got {n}"
            ))),
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Labels foreground components `1..=k` in raster order of their first
/// pixel; background stays 0. Returns the label image and `k`.
pub fn connected_components(
    mask: ArrayView2<'_, u8>,
    connectivity: Connectivity,
) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if mask[(r, c)] == 0 || labels[(r, c)] != 0 {
                continue;
            }
            next += 1;
            labels[(r, c)] = next;
            queue.push_back((r, c));
            while let Some((y, x)) = queue.pop_front() {
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[(ny, nx)] != 0 && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, next)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small_max: f64,
    pub medium_max: f64,
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds {
            small_max: 0.05,
            medium_max: 0.15,
        }
    }
}

impl SizeThresholds {
    pub fn new(small_max: f64, medium_max: f64) -> Result<Self> {
        if !(0.0 < small_max && small_max < medium_max && medium_max < 1.0) {
            return Err(Error::Config(format!(
                "size thresholds need 0 < small_max < medium_max < 1, got ({small_max}, {medium_max})"
            )));
        }
        Ok(SizeThresholds {
            small_max,
            medium_max,
        })
    }

    /// Buckets are `[0, small_max)`, `[small_max, medium_max)`, `[medium_max, 1]`.
    pub fn bucket(&self, area_fraction: f64) -> SizeClass {
        if area_fraction < self.small_max {
            SizeClass::Small
        } else if area_fraction < self.medium_max {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTaxonomy {
    pub count_class: CountClass,
    pub size_class: SizeClass,
    pub area_fraction: f64,
    pub component_count: u32,
}

impl MaskTaxonomy {
    pub fn category(&self) -> (CountClass, SizeClass) {
        (self.count_class, self.size_class)
    }

    /// True when `other` differs in both the count and the size class.
    pub fn is_strict_negative(&self, other: &MaskTaxonomy) -> bool {
        self.count_class != other.count_class && self.size_class != other.size_class
    }
}

impl fmt::Display for MaskTaxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {})",
            self.count_class.as_str(),
            self.size_class.as_str()
        )
    }
}

/// Categorizes a mask using 8-connectivity for the polyp count.
pub fn classify_mask(
    mask: ArrayView2<'_, u8>,
    thresholds: &SizeThresholds,
) -> Result<MaskTaxonomy> {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    if fg == 0 {
        return Err(Error::Validation("no polyp present: mask is empty".into()));
    }
    let (_, k) = connected_components(mask, Connectivity::Eight);
    let area_fraction = fg as f64 / mask.len() as f64;
    Ok(MaskTaxonomy {
        count_class: if k == 1 {
            CountClass::One
        } else {
            CountClass::Many
        },
        size_class: thresholds.bucket(area_fraction),
        area_fraction,
        component_count: k,
    })
}

/// Draws `k` negatives for `anchor` from `pool`, restricted to entries that
/// differ from it in both class dimensions. Without replacement while strict
/// candidates last; any shortfall is filled with replacement.
pub fn select_negatives<S: AsRef<str>>(
    anchor: &MaskTaxonomy,
    pool: &[(S, MaskTaxonomy)],
    k: usize,
    seed_value: u64,
) -> Result<Vec<String>> {
    let candidates: Vec<&str> = pool
        .iter()
        .filter(|(_, t)| anchor.is_strict_negative(t))
        .map(|(id, _)| id.as_ref())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "no negative candidates for anchor category {anchor}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    let mut order = candidates.clone();
    order.shuffle(&mut rng);
    let mut out: Vec<String> = order.iter().take(k).map(|s| s.to_string()).collect();
    if out.len() < k {
        log::warn!(
            "only {} strict negatives for anchor category {anchor}; sampling {} with replacement",
            candidates.len(),
            k - out.len()
        );
        while out.len() < k {
            out.push(candidates[rng.random_range(0..candidates.len())].to_string());
        }
    }
    Ok(out)
}
