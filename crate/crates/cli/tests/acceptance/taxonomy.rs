//! Component labelling against a flood fill, and the six-way partition.

use std::collections::BTreeSet;

use polypseg::ndarray::Array2;
use polypseg::seed;
use polypseg::taxonomy::{
    classify_mask, connected_components, Connectivity, CountClass, SizeClass, SizeThresholds,
};
use rand::Rng;

use crate::{ensure, lib, Outcome};

/// Depth-first flood fill; components numbered by their first pixel in
/// raster order.
fn flood_fill(mask: &Array2<u8>, eight: bool) -> (Array2<u32>, u32) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0;
    for r in 0..h {
        for c in 0..w {
            if mask[(r, c)] == 0 || labels[(r, c)] != 0 {
                continue;
            }
            count += 1;
            let mut stack = vec![(r as i64, c as i64)];
            while let Some((y, x)) = stack.pop() {
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let (yu, xu) = (y as usize, x as usize);
                if mask[(yu, xu)] == 0 || labels[(yu, xu)] != 0 {
                    continue;
                }
                labels[(yu, xu)] = count;
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let diagonal = dy != 0 && dx != 0;
                        if (dy, dx) != (0, 0) && (eight || !diagonal) {
                            stack.push((y + dy, x + dx));
                        }
                    }
                }
            }
        }
    }
    (labels, count)
}

fn compare(mask: &Array2<u8>) -> Result<(), String> {
    for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
        let (got, k) = connected_components(mask.view(), conn);
        let (want, kw) = flood_fill(mask, eight);
        ensure!(
            k == kw && got == want,
            "{conn:?}: {k} vs oracle {kw} components on\n{mask}"
        );
    }
    Ok(())
}

/// Checks one classification against the oracle count and the area buckets.
fn check_class(
    mask: &Array2<u8>,
    thresholds: &SizeThresholds,
    seen: &mut BTreeSet<(CountClass, SizeClass)>,
) -> Result<(), String> {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    let result = classify_mask(mask.view(), thresholds);
    if fg == 0 {
        ensure!(result.is_err(), "empty mask was classified");
        return Ok(());
    }
    let t = lib(result)?;
    let area = fg as f64 / mask.len() as f64;
    let count = if flood_fill(mask, true).1 == 1 {
        CountClass::One
    } else {
        CountClass::Many
    };
    let size = if area < thresholds.small_max {
        SizeClass::Small
    } else if area < thresholds.medium_max {
        SizeClass::Medium
    } else {
        SizeClass::Large
    };
    ensure!(
        t.category() == (count, size),
        "classified {t} but expected ({count:?}, {size:?}) on\n{mask}"
    );
    seen.insert(t.category());
    Ok(())
}

pub fn run() -> Outcome {
    // 2 of 16 pixels is small, up to 6 is medium
    let small = SizeThresholds::new(0.15, 0.4).map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    for bits in 0u32..1 << 16 {
        let mask = Array2::from_shape_fn((4, 4), |(r, c)| ((bits >> (r * 4 + c)) & 1) as u8);
        compare(&mask)?;
        check_class(&mask, &small, &mut seen)?;
    }
    ensure!(
        seen.len() == 6,
        "4x4 masks reached only {} categories: {seen:?}",
        seen.len()
    );

    let mut rng = seed::rng(3);
    let defaults = SizeThresholds::default();
    let mut seen_random = BTreeSet::new();
    for i in 0..100 {
        let density = [0.01, 0.03, 0.08, 0.2, 0.45, 0.6, 0.8][i % 7];
        let mask = Array2::from_shape_fn((32, 32), |_| u8::from(rng.random_bool(density)));
        compare(&mask)?;
        check_class(&mask, &defaults, &mut seen_random)?;
    }
    Ok(format!(
        "65536 4x4 masks x 2 connectivities and 100 random 32x32 masks match; \
         4x4 partition covers all 6 categories, random masks {}",
        seen_random.len()
    ))
}
