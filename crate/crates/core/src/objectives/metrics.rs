//! Overlap metrics on thresholded predictions.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// How images with an empty ground-truth mask are scored.
pub const EMPTY_MASK_CONVENTION: &str =
    "empty ground truth: 1.0 on every metric if the prediction is also empty, 0.0 otherwise; \
     any other 0/0 ratio scores 0.0";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Validation(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Scores {
    pub fn from_confusion(c: Confusion) -> Self {
        if c.tp + c.fn_ == 0 {
            let v = if c.fp == 0 { 1.0 } else { 0.0 };
            return Scores {
                dice: v,
                iou: v,
                precision: v,
                recall: v,
                f2: v,
            };
        }
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Scores {
            dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            precision,
            recall,
            f2: ratio(5.0 * precision * recall, 4.0 * precision + recall),
        }
    }

    fn as_array(&self) -> [f64; 5] {
        [self.dice, self.iou, self.precision, self.recall, self.f2]
    }
}

/// Dice, IoU, precision, recall and F2 of a binary prediction.
pub fn metrics(pred: &[u8], gt: &[u8]) -> Result<Scores> {
    Ok(Scores::from_confusion(Confusion::count(pred, gt)?))
}

/// `1` where `sigmoid(z) >= 0.5`, i.e. `z >= 0`.
pub fn threshold_logits<T: PartialOrd + Default + Copy>(logits: &[T]) -> Vec<u8> {
    logits
        .iter()
        .map(|&z| u8::from(z >= T::default()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScores {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageScores>,
}

#[derive(Serialize)]
struct Summary<'a> {
    images: usize,
    means: Scores,
    convention: &'a str,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, scores: Scores) {
        self.per_image.push(ImageScores {
            id: id.into(),
            scores,
        });
    }

    /// Column means of the per-image rows. All zeros for an empty report.
    pub fn means(&self) -> Scores {
        let n = self.per_image.len();
        if n == 0 {
            return Scores::default();
        }
        let mut acc = [0.0; 5];
        for row in &self.per_image {
            for (a, v) in acc.iter_mut().zip(row.scores.as_array()) {
                *a += v;
            }
        }
        let [dice, iou, precision, recall, f2] = acc.map(|a| a / n as f64);
        Scores {
            dice,
            iou,
            precision,
            recall,
            f2,
        }
    }

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["id", "dice", "iou", "precision", "recall", "f2"])
            .map_err(csv_err)?;
        let mut row = |id: &str, s: &Scores| {
            let mut rec = vec![id.to_string()];
            rec.extend(s.as_array().iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)
        };
        for r in &self.per_image {
            row(&r.id, &r.scores).map_err(csv_err)?;
        }
        row("mean", &self.means()).map_err(csv_err)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> String {
        let s = Summary {
            images: self.per_image.len(),
            means: self.means(),
            convention: EMPTY_MASK_CONVENTION,
        };
        serde_json::to_string_pretty(&s).expect("plain struct serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))?;
        log::info!(
            "metric report ({} images) written to {}; {EMPTY_MASK_CONVENTION}",
            self.per_image.len(),
            dir.display()
        );
        Ok(())
    }
}
