//! Image/mask loading, dataset manifests and experiment splits.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub const MASK_THRESHOLD: u8 = 128;

/// One decoded training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `H x W`, values in `{0, 1}`.
    pub mask: Array2<u8>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<u8>) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 || (h, w) != mask.dim() || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "image {:?} and mask {:?} disagree",
                image.dim(),
                mask.dim()
            )));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(ImageSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn binarize(v: u8) -> u8 {
    u8::from(v >= MASK_THRESHOLD)
}

/// Converts an RGB image to an `H x W x 3` array in `[0, 1]`.
pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer")
}

/// Converts a gray mask to `{0, 1}` using [`MASK_THRESHOLD`].
pub fn gray_to_mask(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| binarize(v)).collect();
    Array2::from_shape_vec((h as usize, w as usize), data).expect("gray buffer")
}

/// Loads a mask at its stored resolution.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    Ok(gray_to_mask(&decode(path)?.to_luma8()))
}

/// Writes an `H x W x 3` array in `[0, 1]` as an 8-bit image; the format
/// follows the extension.
pub fn save_rgb(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a binary mask as 0/255 grayscale.
pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[(y as usize, x as usize)] != 0 {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image/mask pair and resizes both to `target` (`(H, W)`): the
/// image with a triangle (bilinear) filter, the mask with nearest neighbour
/// before binarization.
pub fn load_sample(
    image_path: &Path,
    mask_path: &Path,
    target: (usize, usize),
) -> Result<ImageSample> {
    let img = decode(image_path)?.to_rgb8();
    let mask = decode(mask_path)?.to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Validation(format!(
            "{} is {:?} but its mask {} is {:?}",
            image_path.display(),
            img.dimensions(),
            mask_path.display(),
            mask.dimensions()
        )));
    }
    let (th, tw) = (target.0 as u32, target.1 as u32);
    if th == 0 || tw == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let img = if img.dimensions() == (tw, th) {
        img
    } else {
        imageops::resize(&img, tw, th, FilterType::Triangle)
    };
    let mask = if mask.dimensions() == (tw, th) {
        mask
    } else {
        imageops::resize(&mask, tw, th, FilterType::Nearest)
    };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageSample::new(id, rgb_to_array(&img), gray_to_mask(&mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// A manifest that has not been split yet.
    All,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Validation(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl ManifestEntry {
    pub fn new(image: PathBuf, mask: PathBuf) -> Self {
        let id = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        ManifestEntry { id, image, mask }
    }

    pub fn load(&self, target: (usize, usize)) -> Result<ImageSample> {
        let mut s = load_sample(&self.image, &self.mask, target)?;
        s.id = self.id.clone();
        Ok(s)
    }
}

/// Ordered list of image/mask pairs.
///
/// On disk: optional `# name: ...` and `# split: ...` header lines, then one
/// `image_path<TAB>mask_path` line per entry. Relative paths are resolved
/// against the manifest's directory when read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            name: name.into(),
            split,
            entries,
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate id {:?} in manifest {}",
                    e.id, self.name
                )));
            }
        }
        Ok(())
    }

    /// Pairs `<root>/images/*` with `<root>/masks/*` by file stem.
    pub fn discover(root: &Path) -> Result<Self> {
        let images = list_images(&root.join("images"))?;
        let masks = list_images(&root.join("masks"))?;
        let mut entries = Vec::with_capacity(images.len());
        for img in images {
            let stem = img.file_stem().expect("listed files have names");
            let mask = masks
                .iter()
                .find(|m| m.file_stem() == Some(stem))
                .ok_or_else(|| Error::Validation(format!("no mask for {}", img.display())))?;
            entries.push(ManifestEntry::new(img.clone(), mask.clone()));
        }
        let name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self::new(name, Split::All, entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# name: {}\n# split: {}\n", self.name, self.split.as_str());
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\n", e.image.display(), e.mask.display()));
        }
        s
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut name = String::from("dataset");
        let mut split = Split::All;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    match k.trim() {
                        "name" => name = v.trim().to_string(),
                        "split" => split = v.trim().parse()?,
                        _ => {}
                    }
                }
                continue;
            }
            let (img, mask) = line.split_once('\t').ok_or_else(|| {
                Error::Validation(format!("manifest line {}: expected image<TAB>mask", i + 1))
            })?;
            entries.push(ManifestEntry::new(base.join(img), base.join(mask)));
        }
        Self::new(name, split, entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_all(&self, target: (usize, usize)) -> Result<Vec<ImageSample>> {
        self.entries.iter().map(|e| e.load(target)).collect()
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Single dataset, 70/30.
    I,
    /// Two source datasets, 90/10 each, training halves merged.
    II,
    /// Single dataset, 70/30.
    III,
}

impl Scenario {
    /// Test fraction as `(numerator, denominator)`.
    fn test_ratio(self) -> (usize, usize) {
        match self {
            Scenario::I | Scenario::III => (3, 10),
            Scenario::II => (1, 10),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        })
    }
}

pub const MIN_SPLIT_ENTRIES: usize = 10;

/// Number of test entries: the test fraction rounded up, so 612 entries at
/// 90/10 give 62 test and 550 train.
pub fn test_count(n: usize, scenario: Scenario) -> usize {
    let (num, den) = scenario.test_ratio();
    (n * num).div_ceil(den)
}

/// Splits one manifest. Entries keep their original relative order on each
/// side; which entries go to test depends only on `seed` and the manifest
/// name.
pub fn make_scenario_split(
    dataset: &DatasetManifest,
    scenario: Scenario,
    seed_value: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = dataset.len();
    if n < MIN_SPLIT_ENTRIES {
        return Err(Error::Validation(format!(
            "{} has {n} entries; at least {MIN_SPLIT_ENTRIES} are needed to split",
            dataset.name
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(
        seed_value,
        &format!("split/{}", dataset.name),
    ));
    let n_test = test_count(n, scenario);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, t) in dataset.entries.iter().zip(is_test) {
        if t {
            test.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok((
        DatasetManifest::new(format!("{}_train", dataset.name), Split::Train, train)?,
        DatasetManifest::new(format!("{}_test", dataset.name), Split::Test, test)?,
    ))
}

/// Scenario II over several source datasets: each source is split 90/10,
/// training parts are concatenated and one test manifest is kept per source.
pub fn make_multi_source_split(
    sources: &[DatasetManifest],
    seed_value: u64,
) -> Result<(DatasetManifest, Vec<DatasetManifest>)> {
    if sources.len() < 2 {
        return Err(Error::Validation(format!(
            "scenario II needs two source datasets, got {}",
            sources.len()
        )));
    }
    let mut train = Vec::new();
    let mut tests = Vec::new();
    let mut names = Vec::new();
    for src in sources {
        let (tr, te) = make_scenario_split(src, Scenario::II, seed_value)?;
        train.extend(tr.entries);
        tests.push(te);
        names.push(src.name.clone());
    }
    let merged = DatasetManifest::new(format!("{}_train", names.join("+")), Split::Train, train)?;
    Ok((merged, tests))
}

/// Small procedurally generated datasets for smoke tests and overfit runs.
pub mod synthetic {
    use super::*;

    /// Rectangles as `(row, col, height, width)` in units of `size / 96`.
    const LAYOUTS: [(&str, &[(usize, usize, usize, usize)]); 4] = [
        ("a_one_small", &[(40, 40, 16, 16)]),
        ("b_many_large", &[(8, 8, 32, 32), (56, 52, 32, 32)]),
        ("c_one_medium", &[(30, 20, 24, 32)]),
        ("d_many_medium", &[(10, 60, 20, 20), (64, 12, 20, 20)]),
    ];

    fn pixel(r: usize, c: usize, inside: bool, variant: usize) -> [f32; 3] {
        let t = ((r * 7 + c * 13 + variant * 5) % 17) as f32 / 17.0;
        if inside {
            [0.85 - 0.1 * t, 0.35 + 0.1 * t, 0.3]
        } else {
            [0.25 + 0.15 * t, 0.3 + 0.1 * t, 0.55 - 0.1 * t]
        }
    }

    /// Four samples covering the categories (one, small), (many, large),
    /// (one, medium) and (many, medium) at the default size thresholds.
    /// `size` must be a multiple of 8.
    pub fn four_categories(size: usize) -> Vec<ImageSample> {
        assert!(
            size >= 8 && size.is_multiple_of(8),
            "size must be a positive multiple of 8"
        );
        LAYOUTS
            .iter()
            .enumerate()
            .map(|(v, (id, rects))| {
                let mut mask = Array2::<u8>::zeros((size, size));
                for &(r, c, h, w) in rects.iter() {
                    let s = |x: usize| x * size / 96;
                    mask.slice_mut(ndarray::s![s(r)..s(r + h), s(c)..s(c + w)])
                        .fill(1);
                }
                let image = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
                    pixel(r, c, mask[(r, c)] == 1, v)[ch]
                });
                ImageSample::new(*id, image, mask).expect("consistent synthetic sample")
            })
            .collect()
    }

    /// Writes samples as `<root>/images/<id>.png` and `<root>/masks/<id>.png`.
    pub fn write_dataset(root: &Path, samples: &[ImageSample]) -> Result<DatasetManifest> {
        let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
        for d in [&img_dir, &mask_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for s in samples {
            save_rgb(&s.image, &img_dir.join(format!("{}.png", s.id)))?;
            save_mask(&s.mask, &mask_dir.join(format!("{}.png", s.id)))?;
        }
        DatasetManifest::discover(root)
    }
}
