//! Scalar loss functions on plain slices.
//!
//! The graph counterparts used for training live on
//! [`Graph`](crate::netcore::Graph); these versions are the reference the
//! graph ops are tested against and are handy for reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Weight of the contrastive term in the total loss.
    pub beta: f64,
    /// Negatives per anchor.
    pub k: usize,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            beta: 0.5,
            k: 4,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(Error::Config(format!(
                "dice_smooth must be >= 0, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sum_j max(0, |h - hp|^2 - |h - hn_j|^2 + alpha)` for one anchor.
pub fn triplet_loss(h: &[f64], hp: &[f64], negatives: &[&[f64]], alpha: f64) -> f64 {
    if negatives.is_empty() {
        log::warn!("triplet loss called with no negatives; returning 0");
        return 0.0;
    }
    let dp = sq_dist(h, hp);
    negatives
        .iter()
        .map(|n| (dp - sq_dist(h, n) + alpha).max(0.0))
        .sum()
}

/// `1 - (2 sum(PG) + s) / (sum(P) + sum(G) + s)`.
pub fn dice_loss(p: &[f64], g: &[f64], smooth: f64) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::Validation(format!(
            "dice_loss length mismatch: {} vs {}",
            p.len(),
            g.len()
        )));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "dice_loss expects probabilities in [0, 1], found {bad}"
        )));
    }
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + g.iter().sum::<f64>() + smooth;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - (2.0 * inter + smooth) / denom)
}

/// Mean binary cross-entropy from logits, in the overflow-free form
/// `max(z, 0) - z g + ln(1 + e^{-|z|})`.
pub fn bce_loss(logits: &[f64], g: &[f64]) -> Result<f64> {
    if logits.len() != g.len() || logits.is_empty() {
        return Err(Error::Validation(format!(
            "bce_loss length mismatch: {} vs {}",
            logits.len(),
            g.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let total: f64 = logits
        .iter()
        .zip(g)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLoss {
    pub bce: f64,
    pub dice: f64,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.bce + self.dice
    }
}

/// BCE on the logits plus Dice on their sigmoid.
pub fn seg_loss(logits: &[f64], g: &[f64], smooth: f64) -> Result<SegLoss> {
    let bce = bce_loss(logits, g)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let dice = dice_loss(&probs, g, smooth)?;
    Ok(SegLoss { bce, dice })
}

pub fn total_loss(seg: f64, cl: f64, beta: f64) -> f64 {
    seg + beta * cl
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
