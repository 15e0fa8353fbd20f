//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records only the operations whose result depends on a value
//! that requires a gradient. Everything else is evaluated eagerly and handed
//! back as a constant [`Var`], so a graph built with [`Graph::no_grad`] keeps
//! no intermediate state at all: a tensor is freed as soon as the caller drops
//! its last handle.
//!
//! [`Graph::backward`] consumes the tape and releases each node right after
//! its gradient has been propagated.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvDims, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

/// Handle to a value produced inside a graph.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }
}

/// Normalization statistics for [`Graph::batch_norm`].
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with stored running statistics.
    Running {
        mean: &'a [T],
        var: &'a [T],
        eps: f64,
    },
}

/// Per-channel mean and biased variance of a training-mode batch norm.
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var<T>,
        w: Var<T>,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var<T>,
        gamma: Var<T>,
        beta: Option<usize>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Linear {
        x: Var<T>,
        w: Var<T>,
        bias: Option<usize>,
    },
    GlobalAvgPool {
        x: usize,
        in_shape: Vec<usize>,
    },
    MaxPool {
        x: usize,
        in_shape: Vec<usize>,
        arg: Vec<u32>,
    },
    Upsample {
        x: usize,
        in_shape: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<usize>, usize)>,
    },
    Add(Option<usize>, Option<usize>),
    Mul(Var<T>, Var<T>),
    ScaleChannels {
        x: Var<T>,
        gate: Var<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Scale(usize, T),
    Reshape(usize, Vec<usize>),
    Sum(usize, Vec<usize>),
    Mean(usize, Vec<usize>),
    Bce {
        logits: Var<T>,
        target: Rc<Tensor<T>>,
    },
    Dice {
        probs: Var<T>,
        target: Rc<Tensor<T>>,
        smooth: T,
    },
    Triplet {
        h: Var<T>,
        hp: Var<T>,
        hn: Var<T>,
        alpha: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    param: Option<String>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params_used: Vec<String>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    pub by_param: HashMap<String, Tensor<T>>,
}

fn same_shape(layer: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(layer, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank(layer: &str, t: &[usize], r: usize) -> Result<()> {
    if t.len() != r {
        return Err(Error::shape(
            layer,
            format!("expected rank {r} input, got {t:?}"),
        ));
    }
    Ok(())
}

fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params_used: Vec::new(),
        }
    }

    /// A graph that never records: every result is a constant.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of every parameter read while building this graph, in order.
    pub fn params_used(&self) -> &[String] {
        &self.params_used
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(t),
        }
    }

    /// Introduces a named parameter. It is tracked only when `trainable` is set
    /// and the graph records gradients.
    pub fn param(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> Var<T> {
        self.params_used.push(name.to_string());
        let value = Rc::new(t);
        if trainable && self.grad_enabled {
            let id = self.nodes.len();
            self.nodes.push(Node {
                value: value.clone(),
                op: Op::Leaf,
                param: Some(name.to_string()),
            });
            Var {
                id: Some(id),
                value,
            }
        } else {
            Var { id: None, value }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<T> {
        let value = Rc::new(value);
        if tracked && self.grad_enabled {
            let id = self.nodes.len();
            self.nodes.push(Node {
                value: value.clone(),
                op,
                param: None,
            });
            Var {
                id: Some(id),
                value,
            }
        } else {
            Var { id: None, value }
        }
    }

    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        rank("conv2d", x.shape(), 4)?;
        rank("conv2d", w.shape(), 4)?;
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} incompatible with weight {:?}",
                    x.shape(),
                    w.shape()
                ),
            ));
        }
        if let Some(bv) = bias {
            same_shape("conv2d bias", bv.shape(), &[o])?;
        }
        if geom.dilation == 0 {
            return Err(Error::shape("conv2d", "dilation must be >= 1"));
        }
        let (ho, wo) = match (geom.out_len(h, k), geom.out_len(wd, k)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {k} with {geom:?} does not fit input {:?}",
                        x.shape()
                    ),
                ))
            }
        };
        let dims = ConvDims {
            c,
            h,
            w: wd,
            k,
            ho,
            wo,
        };
        let mut out = Tensor::zeros(&[b, o, ho, wo]);
        kernels::conv2d_forward(
            x.value().data(),
            b,
            &dims,
            w.value().data(),
            o,
            bias.map(|bv| bv.value().data()),
            &geom,
            out.data_mut(),
        );
        let tracked =
            x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv {
            x: x.clone(),
            w: w.clone(),
            bias: bias.and_then(|b| b.id),
            geom,
        };
        Ok(self.push(out, op, tracked))
    }

    /// Batch normalization over every axis except axis 1. Accepts `[B, C]` or
    /// `[B, C, H, W]`. In batch mode the batch moments are returned so the
    /// caller can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: BnStats<'_, T>,
    ) -> Result<(Var<T>, Option<BatchMoments<T>>)> {
        let shape = x.shape().to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [B,C] or [B,C,H,W], got {shape:?}"),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        same_shape("batch_norm gamma", gamma.shape(), &[c])?;
        same_shape("batch_norm beta", beta.shape(), &[c])?;
        let n = b * s;
        let xd = x.value().data();
        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * s;
                        acc += xd[off..off + s].iter().copied().sum::<T>();
                    }
                    let m = acc / cst(n as f64);
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * s;
                        for &v in &xd[off..off + s] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / cst(n as f64);
                }
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + cst(eps)).sqrt())
            .collect();
        let (g, be) = (gamma.value().data(), beta.value().data());
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * s;
                    let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                    for i in off..off + s {
                        od[i] = gg * (xd[i] - m) * is + bb;
                    }
                }
            }
        }
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.clone(),
            var,
            count: n,
        });
        let tracked = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.id,
            mean,
            inv_std,
            batch_stats,
        };
        Ok((self.push(out, op, tracked), moments))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = x.requires_grad();
        self.push(out, Op::Relu(x.id.unwrap_or(0)), tracked)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(sigmoid);
        let tracked = x.requires_grad();
        self.push(out, Op::Sigmoid(x.id.unwrap_or(0)), tracked)
    }

    /// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        rank("linear", x.shape(), 2)?;
        rank("linear", w.shape(), 2)?;
        let (b, fin) = (x.shape()[0], x.shape()[1]);
        let (fout, win) = (w.shape()[0], w.shape()[1]);
        if win != fin {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?} incompatible with weight {:?}",
                    x.shape(),
                    w.shape()
                ),
            ));
        }
        if let Some(bv) = bias {
            same_shape("linear bias", bv.shape(), &[fout])?;
        }
        let mut out = Tensor::zeros(&[b, fout]);
        T::gemm(
            b,
            fin,
            fout,
            T::one(),
            x.value().data(),
            false,
            w.value().data(),
            true,
            T::zero(),
            out.data_mut(),
        );
        if let Some(bv) = bias {
            let bd = bv.value().data();
            for row in out.data_mut().chunks_mut(fout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let tracked =
            x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Linear {
            x: x.clone(),
            w: w.clone(),
            bias: bias.and_then(|b| b.id),
        };
        Ok(self.push(out, op, tracked))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        rank("global_avg_pool", x.shape(), 4)?;
        let shape = x.shape().to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = cst::<T>(1.0 / hw as f64);
        let data: Vec<T> = x
            .value()
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        let tracked = x.requires_grad();
        let op = Op::GlobalAvgPool {
            x: x.id.unwrap_or(0),
            in_shape: shape,
        };
        Ok(self.push(out, op, tracked))
    }

    pub fn max_pool2d(&mut self, x: &Var<T>, k: usize, geom: ConvGeom) -> Result<Var<T>> {
        rank("max_pool2d", x.shape(), 4)?;
        let shape = x.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = match (geom.out_len(h, k), geom.out_len(w, k)) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(Error::shape(
                    "max_pool2d",
                    format!("window does not fit {shape:?}"),
                ))
            }
        };
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let arg = kernels::maxpool_forward(
            x.value().data(),
            b * c,
            (h, w),
            k,
            &geom,
            (ho, wo),
            out.data_mut(),
        );
        let tracked = x.requires_grad();
        let op = Op::MaxPool {
            x: x.id.unwrap_or(0),
            in_shape: shape,
            arg,
        };
        Ok(self.push(out, op, tracked))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: &Var<T>, size: (usize, usize)) -> Result<Var<T>> {
        rank("bilinear_upsample", x.shape(), 4)?;
        let shape = x.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if size.0 == 0 || size.1 == 0 || h == 0 || w == 0 {
            return Err(Error::shape("bilinear_upsample", "empty spatial extent"));
        }
        let mut out = Tensor::zeros(&[b, c, size.0, size.1]);
        kernels::bilinear_forward(x.value().data(), b * c, (h, w), size, out.data_mut());
        let tracked = x.requires_grad();
        let op = Op::Upsample {
            x: x.id.unwrap_or(0),
            in_shape: shape,
        };
        Ok(self.push(out, op, tracked))
    }

    /// Concatenation along the channel axis of `[B, C, H, W]` tensors.
    pub fn concat_channels(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("channel_concat", "no inputs"))?;
        rank("channel_concat", first.shape(), 4)?;
        let (b, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
        for p in parts {
            rank("channel_concat", p.shape(), 4)?;
            if p.shape()[0] != b || p.shape()[2] != h || p.shape()[3] != w {
                return Err(Error::shape(
                    "channel_concat",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
        }
        let hw = h * w;
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for p in parts {
                let c = p.shape()[1];
                data.extend_from_slice(&p.value().data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::from_vec(&[b, total, h, w], data)?;
        let tracked = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat {
            parts: parts.iter().map(|p| (p.id, p.shape()[1])).collect(),
        };
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("element_add", a.shape(), b.shape())?;
        let mut out = a.value().clone();
        out.add_assign(b.value());
        let tracked = a.requires_grad() || b.requires_grad();
        Ok(self.push(out, Op::Add(a.id, b.id), tracked))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("element_mul", a.shape(), b.shape())?;
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        let tracked = a.requires_grad() || b.requires_grad();
        Ok(self.push(out, Op::Mul(a.clone(), b.clone()), tracked))
    }

    /// Multiplies each channel plane of `x: [B, C, H, W]` by `gate: [B, C]`.
    pub fn scale_channels(&mut self, x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
        rank("scale_channels", x.shape(), 4)?;
        same_shape("scale_channels gate", gate.shape(), &x.shape()[..2])?;
        let hw = x.shape()[2] * x.shape()[3];
        let gd = gate.value().data();
        let data = x
            .value()
            .data()
            .chunks(hw)
            .zip(gd)
            .flat_map(|(p, &g)| p.iter().map(move |&v| v * g))
            .collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        let tracked = x.requires_grad() || gate.requires_grad();
        let op = Op::ScaleChannels {
            x: x.clone(),
            gate: gate.clone(),
        };
        Ok(self.push(out, op, tracked))
    }

    /// Row-wise L2 normalization of `[B, D]`. A zero row is a numeric error.
    pub fn l2_normalize(&mut self, x: &Var<T>) -> Result<Var<T>> {
        rank("l2_normalize", x.shape(), 2)?;
        let d = x.shape()[1];
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut data = Vec::with_capacity(x.value().numel());
        for (i, row) in x.value().data().chunks(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot L2-normalize row {i}: norm is {n}"
                )));
            }
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::from_vec(x.shape(), data)?;
        let tracked = x.requires_grad();
        let op = Op::L2Normalize {
            x: x.id.unwrap_or(0),
            norms,
        };
        Ok(self.push(out, op, tracked))
    }

    pub fn scale(&mut self, x: &Var<T>, c: f64) -> Var<T> {
        let c = cst::<T>(c);
        let out = x.value().map(|v| v * c);
        let tracked = x.requires_grad();
        self.push(out, Op::Scale(x.id.unwrap_or(0), c), tracked)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value().clone().reshape(shape)?;
        let tracked = x.requires_grad();
        Ok(self.push(
            out,
            Op::Reshape(x.id.unwrap_or(0), x.shape().to_vec()),
            tracked,
        ))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let s = x.value().data().iter().copied().sum::<T>();
        let tracked = x.requires_grad();
        self.push(
            Tensor::scalar(s),
            Op::Sum(x.id.unwrap_or(0), x.shape().to_vec()),
            tracked,
        )
    }

    pub fn mean(&mut self, x: &Var<T>) -> Var<T> {
        let n = x.value().numel().max(1);
        let s = x.value().data().iter().copied().sum::<T>() / cst(n as f64);
        let tracked = x.requires_grad();
        self.push(
            Tensor::scalar(s),
            Op::Mean(x.id.unwrap_or(0), x.shape().to_vec()),
            tracked,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated as `max(z,0) - z*g + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: &Var<T>, target: Rc<Tensor<T>>) -> Result<Var<T>> {
        same_shape("bce_loss", logits.shape(), target.shape())?;
        if !logits.value().all_finite() {
            return Err(Error::Numeric("non-finite logits in bce_loss".into()));
        }
        let n = logits.value().numel();
        let total: T = logits
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &g)| z.max(T::zero()) - z * g + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let out = Tensor::scalar(total / cst(n as f64));
        let tracked = logits.requires_grad();
        let op = Op::Bce {
            logits: logits.clone(),
            target,
        };
        Ok(self.push(out, op, tracked))
    }

    /// `1 - (2 sum(PG) + s) / (sum(P) + sum(G) + s)` over every element.
    pub fn dice_loss(
        &mut self,
        probs: &Var<T>,
        target: Rc<Tensor<T>>,
        smooth: f64,
    ) -> Result<Var<T>> {
        same_shape("dice_loss", probs.shape(), target.shape())?;
        let pd = probs.value().data();
        if pd.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(Error::Validation(
                "dice_loss expects probabilities in [0, 1]; apply sigmoid first".into(),
            ));
        }
        let s = cst::<T>(smooth);
        let (inter, sum) = pd
            .iter()
            .zip(target.data())
            .fold((T::zero(), T::zero()), |(i, t), (&p, &g)| {
                (i + p * g, t + p + g)
            });
        let denom = sum + s;
        let loss = if denom > T::zero() {
            T::one() - (cst::<T>(2.0) * inter + s) / denom
        } else {
            T::zero()
        };
        let tracked = probs.requires_grad();
        let op = Op::Dice {
            probs: probs.clone(),
            target,
            smooth: s,
        };
        Ok(self.push(Tensor::scalar(loss), op, tracked))
    }

    /// Batched triplet loss. `h` and `hp` are `[B, D]`; `hn` is `[B*K, D]` with
    /// the negatives of anchor `i` in rows `i*K .. (i+1)*K`. Returns the mean
    /// over anchors of `sum_j max(0, |h-hp|^2 - |h-hn_j|^2 + alpha)`.
    pub fn triplet_loss(
        &mut self,
        h: &Var<T>,
        hp: &Var<T>,
        hn: &Var<T>,
        alpha: f64,
    ) -> Result<Var<T>> {
        rank("triplet_loss", h.shape(), 2)?;
        same_shape("triplet_loss positive", hp.shape(), h.shape())?;
        rank("triplet_loss", hn.shape(), 2)?;
        let (b, d) = (h.shape()[0], h.shape()[1]);
        if hn.shape()[1] != d || b == 0 || !hn.shape()[0].is_multiple_of(b) {
            return Err(Error::shape(
                "triplet_loss",
                format!(
                    "negatives {:?} incompatible with anchors {:?}",
                    hn.shape(),
                    h.shape()
                ),
            ));
        }
        let k = hn.shape()[0] / b;
        if k == 0 {
            log::warn!("triplet loss with zero negatives per anchor evaluates to 0");
        }
        let a = cst::<T>(alpha);
        let mut total = T::zero();
        for i in 0..b {
            let hi = h.value().row(i);
            let dp = sq_dist(hi, hp.value().row(i));
            for j in 0..k {
                let dn = sq_dist(hi, hn.value().row(i * k + j));
                total += (dp - dn + a).max(T::zero());
            }
        }
        let out = Tensor::scalar(total / cst(b as f64));
        let tracked = h.requires_grad() || hp.requires_grad() || hn.requires_grad();
        let op = Op::Triplet {
            h: h.clone(),
            hp: hp.clone(),
            hn: hn.clone(),
            alpha: a,
        };
        Ok(self.push(out, op, tracked))
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", loss.shape()),
            ));
        }
        let mut out = Gradients::default();
        let Some(root) = loss.id else {
            return Ok(out);
        };
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        let mut nodes = self.nodes;
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(dy) = grads[id].take() else {
                continue;
            };
            if let Some(name) = node.param {
                out.by_param.insert(name, dy);
                continue;
            }
            propagate(&node.value, node.op, &dy, &mut grads);
        }
        Ok(out)
    }
}

fn sq_dist<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Adds into the gradient slot of `id`, creating it on first use.
fn slot<'a, T: Element>(
    grads: &'a mut [Option<Tensor<T>>],
    id: usize,
    shape: &[usize],
) -> &'a mut [T] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], id: Option<usize>, g: Tensor<T>) {
    if let Some(id) = id {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            empty => *empty = Some(g),
        }
    }
}

fn propagate<T: Element>(
    y: &Tensor<T>,
    op: Op<T>,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let g = dy.data();
    match op {
        Op::Leaf => {}
        Op::Conv { x, w, bias, geom } => {
            let xs = x.shape();
            let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, k) = (w.shape()[0], w.shape()[2]);
            let dims = ConvDims {
                c,
                h,
                w: wd,
                k,
                ho: y.shape()[2],
                wo: y.shape()[3],
            };
            let xshape = xs.to_vec();
            let wshape = w.shape().to_vec();
            let mut dx = x.id.map(|_| Tensor::zeros(&xshape));
            let mut dw = w.id.map(|_| Tensor::zeros(&wshape));
            let mut db = bias.map(|_| Tensor::zeros(&[o]));
            kernels::conv2d_backward(
                x.value().data(),
                b,
                &dims,
                w.value().data(),
                o,
                &geom,
                g,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            if let Some(t) = dx {
                accumulate(grads, x.id, t);
            }
            if let Some(t) = dw {
                accumulate(grads, w.id, t);
            }
            if let Some(t) = db {
                accumulate(grads, bias, t);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        } => {
            let shape = x.shape().to_vec();
            let (b, c) = (shape[0], shape[1]);
            let s: usize = shape[2..].iter().product();
            let n = cst::<T>((b * s) as f64);
            let xd = x.value().data();
            let gd = gamma.value().data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * s;
                    for i in off..off + s {
                        let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                        sum_dy[ch] += g[i];
                        sum_dy_xhat[ch] += g[i] * xhat;
                    }
                }
            }
            if x.id.is_some() {
                let mut dx = Tensor::zeros(&shape);
                let dxd = dx.data_mut();
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * s;
                        let scale = gd[ch] * inv_std[ch];
                        for i in off..off + s {
                            dxd[i] = if batch_stats {
                                let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                scale / n * (n * g[i] - sum_dy[ch] - xhat * sum_dy_xhat[ch])
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                accumulate(grads, x.id, dx);
            }
            if gamma.id.is_some() {
                accumulate(
                    grads,
                    gamma.id,
                    Tensor::from_vec(&[c], sum_dy_xhat).expect("shape"),
                );
            }
            if beta.is_some() {
                accumulate(grads, beta, Tensor::from_vec(&[c], sum_dy).expect("shape"));
            }
        }
        Op::Relu(x) => {
            let dx = slot(grads, x, y.shape());
            for ((d, &out), &gv) in dx.iter_mut().zip(y.data()).zip(g) {
                if out > T::zero() {
                    *d += gv;
                }
            }
        }
        Op::Sigmoid(x) => {
            let dx = slot(grads, x, y.shape());
            for ((d, &s), &gv) in dx.iter_mut().zip(y.data()).zip(g) {
                *d += gv * s * (T::one() - s);
            }
        }
        Op::Linear { x, w, bias } => {
            let (b, fin) = (x.shape()[0], x.shape()[1]);
            let fout = w.shape()[0];
            if x.id.is_some() {
                let mut dx = Tensor::zeros(x.shape());
                T::gemm(
                    b,
                    fout,
                    fin,
                    T::one(),
                    g,
                    false,
                    w.value().data(),
                    false,
                    T::zero(),
                    dx.data_mut(),
                );
                accumulate(grads, x.id, dx);
            }
            if w.id.is_some() {
                let mut dw = Tensor::zeros(w.shape());
                T::gemm(
                    fout,
                    b,
                    fin,
                    T::one(),
                    g,
                    true,
                    x.value().data(),
                    false,
                    T::zero(),
                    dw.data_mut(),
                );
                accumulate(grads, w.id, dw);
            }
            if let Some(bid) = bias {
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(
                    grads,
                    Some(bid),
                    Tensor::from_vec(&[fout], db).expect("shape"),
                );
            }
        }
        Op::GlobalAvgPool { x, in_shape } => {
            let hw = in_shape[2] * in_shape[3];
            let inv = cst::<T>(1.0 / hw as f64);
            let dx = slot(grads, x, &in_shape);
            for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                plane.iter_mut().for_each(|d| *d += gv * inv);
            }
        }
        Op::MaxPool { x, in_shape, arg } => {
            let hw = in_shape[2] * in_shape[3];
            let out_hw = y.shape()[2] * y.shape()[3];
            let dx = slot(grads, x, &in_shape);
            for (o, (&a, &gv)) in arg.iter().zip(g).enumerate() {
                let plane = o / out_hw;
                dx[plane * hw + a as usize] += gv;
            }
        }
        Op::Upsample { x, in_shape } => {
            let planes = in_shape[0] * in_shape[1];
            let dx = slot(grads, x, &in_shape);
            kernels::bilinear_backward(
                g,
                planes,
                (in_shape[2], in_shape[3]),
                (y.shape()[2], y.shape()[3]),
                dx,
            );
        }
        Op::Concat { parts } => {
            let (b, total, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
            let hw = h * w;
            let mut offset = 0;
            for (id, c) in parts {
                if let Some(id) = id {
                    let dx = slot(grads, id, &[b, c, h, w]);
                    for bi in 0..b {
                        let src = &g[(bi * total + offset) * hw..(bi * total + offset + c) * hw];
                        for (d, &v) in dx[bi * c * hw..(bi + 1) * c * hw].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, b, dy.clone());
            }
            if a.is_some() {
                accumulate(grads, a, dy.clone());
            }
        }
        Op::Mul(a, b) => {
            if a.id.is_some() {
                let data = g
                    .iter()
                    .zip(b.value().data())
                    .map(|(&gv, &v)| gv * v)
                    .collect();
                accumulate(
                    grads,
                    a.id,
                    Tensor::from_vec(a.shape(), data).expect("shape"),
                );
            }
            if b.id.is_some() {
                let data = g
                    .iter()
                    .zip(a.value().data())
                    .map(|(&gv, &v)| gv * v)
                    .collect();
                accumulate(
                    grads,
                    b.id,
                    Tensor::from_vec(b.shape(), data).expect("shape"),
                );
            }
        }
        Op::ScaleChannels { x, gate } => {
            let hw = x.shape()[2] * x.shape()[3];
            if x.id.is_some() {
                let gd = gate.value().data();
                let data = g
                    .chunks(hw)
                    .zip(gd)
                    .flat_map(|(p, &gv)| p.iter().map(move |&v| v * gv))
                    .collect();
                accumulate(
                    grads,
                    x.id,
                    Tensor::from_vec(x.shape(), data).expect("shape"),
                );
            }
            if gate.id.is_some() {
                let data = g
                    .chunks(hw)
                    .zip(x.value().data().chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                accumulate(
                    grads,
                    gate.id,
                    Tensor::from_vec(gate.shape(), data).expect("shape"),
                );
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = y.shape()[1];
            let dx = slot(grads, x, y.shape());
            for (i, n) in norms.iter().enumerate() {
                let yr = &y.data()[i * d..(i + 1) * d];
                let gr = &g[i * d..(i + 1) * d];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    dx[i * d + j] += (gr[j] - yr[j] * dot) / *n;
                }
            }
        }
        Op::Scale(x, c) => {
            let dx = slot(grads, x, y.shape());
            for (d, &gv) in dx.iter_mut().zip(g) {
                *d += gv * c;
            }
        }
        Op::Reshape(x, shape) => {
            for (d, &gv) in slot(grads, x, &shape).iter_mut().zip(g) {
                *d += gv;
            }
        }
        Op::Sum(x, shape) => {
            slot(grads, x, &shape).iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Mean(x, shape) => {
            let n: usize = shape.iter().product();
            let v = g[0] / cst(n.max(1) as f64);
            slot(grads, x, &shape).iter_mut().for_each(|d| *d += v);
        }
        Op::Bce { logits, target } => {
            let n = cst::<T>(logits.value().numel() as f64);
            let scale = g[0] / n;
            let data = logits
                .value()
                .data()
                .iter()
                .zip(target.data())
                .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                .collect();
            accumulate(
                grads,
                logits.id,
                Tensor::from_vec(logits.shape(), data).expect("shape"),
            );
        }
        Op::Dice {
            probs,
            target,
            smooth,
        } => {
            let pd = probs.value().data();
            let (inter, sum) = pd
                .iter()
                .zip(target.data())
                .fold((T::zero(), T::zero()), |(i, t), (&p, &gv)| {
                    (i + p * gv, t + p + gv)
                });
            let denom = sum + smooth;
            let two = cst::<T>(2.0);
            let num = two * inter + smooth;
            let data = target
                .data()
                .iter()
                .map(|&gv| {
                    if denom > T::zero() {
                        -(two * gv * denom - num) / (denom * denom) * g[0]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(
                grads,
                probs.id,
                Tensor::from_vec(probs.shape(), data).expect("shape"),
            );
        }
        Op::Triplet { h, hp, hn, alpha } => {
            let (b, d) = (h.shape()[0], h.shape()[1]);
            let k = hn.shape()[0] / b;
            let scale = g[0] / cst(b as f64);
            let two = cst::<T>(2.0);
            let mut dh = Tensor::zeros(h.shape());
            let mut dp = Tensor::zeros(hp.shape());
            let mut dn = Tensor::zeros(hn.shape());
            for i in 0..b {
                let hi = h.value().row(i);
                let pi = hp.value().row(i);
                let dpos = sq_dist(hi, pi);
                for j in 0..k {
                    let nj = hn.value().row(i * k + j);
                    if dpos - sq_dist(hi, nj) + alpha <= T::zero() {
                        continue;
                    }
                    for t in 0..d {
                        dh.data_mut()[i * d + t] += scale * two * (nj[t] - pi[t]);
                        dp.data_mut()[i * d + t] -= scale * two * (hi[t] - pi[t]);
                        dn.data_mut()[(i * k + j) * d + t] += scale * two * (hi[t] - nj[t]);
                    }
                }
            }
            accumulate(grads, h.id, dh);
            accumulate(grads, hp.id, dp);
            accumulate(grads, hn.id, dn);
        }
    }
}
