//! Layer-level building blocks on top of [`Graph`].
//!
//! A [`Ctx`] pairs a graph with the [`ParameterSet`] that feeds it. Parameters
//! are addressed by path (`decoder/ca/a/weight`). When the context is created
//! with [`Ctx::initializing`], missing parameters are created on first use,
//! so one forward pass over a dummy batch both declares and initializes a
//! network.

use rand::Rng;

use super::graph::{BnStats, Graph, Var};
use super::kernels::ConvGeom;
use super::params::{EntryKind, ParameterSet};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{cst, Element, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

impl Init {
    fn build<T: Element>(self, shape: &[usize], seed: u64) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = seed::rng(seed);
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| cst(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, data).expect("shape")
            }
        }
    }
}

pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a mut ParameterSet<T>,
    pub mode: Mode,
    init_seed: Option<u64>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParameterSet<T>, mode: Mode) -> Self {
        Ctx {
            graph,
            params,
            mode,
            init_seed: None,
        }
    }

    /// A training-mode context that creates missing parameters. Each value is
    /// seeded from `seed` and its own path, independent of creation order.
    pub fn initializing(
        graph: &'a mut Graph<T>,
        params: &'a mut ParameterSet<T>,
        seed: u64,
    ) -> Self {
        Ctx {
            graph,
            params,
            mode: Mode::Train,
            init_seed: Some(seed),
        }
    }

    fn ensure(&mut self, name: &str, shape: &[usize], init: Init, kind: EntryKind) -> Result<()> {
        match self.params.get(name) {
            Some(e) if e.value.shape() == shape => Ok(()),
            Some(e) => Err(Error::shape(
                name,
                format!(
                    "stored shape {:?}, layer expects {shape:?}",
                    e.value.shape()
                ),
            )),
            None => match self.init_seed {
                Some(base) => {
                    let value = init.build(shape, seed::derive(base, name));
                    self.params.insert(name, value, kind);
                    Ok(())
                }
                None => Err(Error::Validation(format!("missing parameter {name}"))),
            },
        }
    }

    /// Fetches (creating if allowed) a weight and places it on the graph.
    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var<T>> {
        self.ensure(name, shape, init, EntryKind::Weight)?;
        let e = self.params.get(name).expect("ensured");
        let trainable = e.trainable();
        let value = e.value.clone();
        Ok(self.graph.param(name, value, trainable))
    }

    pub fn conv(
        &mut self,
        path: &str,
        x: &Var<T>,
        out_ch: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Var<T>> {
        let in_ch = *x.shape().get(1).ok_or_else(|| {
            Error::shape(
                path,
                format!("conv2d expects [B,C,H,W], got {:?}", x.shape()),
            )
        })?;
        let fan_in = in_ch * k * k;
        let w = self.weight(
            &format!("{path}/weight"),
            &[out_ch, in_ch, k, k],
            Init::HeUniform { fan_in },
        )?;
        let b = if bias {
            Some(self.weight(&format!("{path}/bias"), &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        self.graph
            .conv2d(x, &w, b.as_ref(), geom)
            .map_err(|e| e.in_layer(path))
    }

    pub fn batch_norm(&mut self, path: &str, x: &Var<T>) -> Result<Var<T>> {
        let c = *x
            .shape()
            .get(1)
            .ok_or_else(|| Error::shape(path, format!("batch_norm input {:?}", x.shape())))?;
        let gamma = self.weight(&format!("{path}/weight"), &[c], Init::Ones)?;
        let beta = self.weight(&format!("{path}/bias"), &[c], Init::Zeros)?;
        let rm_name = format!("{path}/running_mean");
        let rv_name = format!("{path}/running_var");
        self.ensure(&rm_name, &[c], Init::Zeros, EntryKind::Buffer)?;
        self.ensure(&rv_name, &[c], Init::Ones, EntryKind::Buffer)?;
        match self.mode {
            Mode::Train => {
                let (y, moments) = self
                    .graph
                    .batch_norm(x, &gamma, &beta, BnStats::Batch { eps: BN_EPS })
                    .map_err(|e| e.in_layer(path))?;
                if self.init_seed.is_some() {
                    // the initialization trace leaves running statistics at their defaults
                    return Ok(y);
                }
                let m = moments.expect("batch statistics");
                let mom = cst::<T>(BN_MOMENTUM);
                let keep = cst::<T>(1.0 - BN_MOMENTUM);
                let unbias = if m.count > 1 {
                    cst::<T>(m.count as f64 / (m.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = &mut self.params.get_mut(&rm_name).expect("ensured").value;
                for (r, &v) in rm.data_mut().iter_mut().zip(&m.mean) {
                    *r = keep * *r + mom * v;
                }
                let rv = &mut self.params.get_mut(&rv_name).expect("ensured").value;
                for (r, &v) in rv.data_mut().iter_mut().zip(&m.var) {
                    *r = keep * *r + mom * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.value(&rm_name)?.data().to_vec();
                let rv = self.params.value(&rv_name)?.data().to_vec();
                let stats = BnStats::Running {
                    mean: &rm,
                    var: &rv,
                    eps: BN_EPS,
                };
                let (y, _) = self
                    .graph
                    .batch_norm(x, &gamma, &beta, stats)
                    .map_err(|e| e.in_layer(path))?;
                Ok(y)
            }
        }
    }

    pub fn linear(&mut self, path: &str, x: &Var<T>, out: usize, bias: bool) -> Result<Var<T>> {
        let fin = *x
            .shape()
            .get(1)
            .ok_or_else(|| Error::shape(path, format!("linear input {:?}", x.shape())))?;
        let w = self.weight(
            &format!("{path}/weight"),
            &[out, fin],
            Init::HeUniform { fan_in: fin },
        )?;
        let b = if bias {
            Some(self.weight(&format!("{path}/bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        self.graph
            .linear(x, &w, b.as_ref())
            .map_err(|e| e.in_layer(path))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.graph.relu(x)
    }

    /// Convolution (no bias), batch norm, ReLU.
    pub fn conv_bn_relu(
        &mut self,
        path: &str,
        x: &Var<T>,
        out_ch: usize,
        k: usize,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        let y = self.conv(&format!("{path}/conv"), x, out_ch, k, geom, false)?;
        let y = self.batch_norm(&format!("{path}/bn"), &y)?;
        Ok(self.graph.relu(&y))
    }
}

/// Declarative description of a single layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    BatchNorm {
        ch: usize,
    },
    Relu,
    Sigmoid,
    FullyConnected {
        input: usize,
        output: usize,
    },
    GlobalAvgPool,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BilinearUpsample {
        factor: usize,
    },
    ChannelConcat,
    ElementAdd,
    ElementMul,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::BilinearUpsample { .. } => "bilinear_upsample",
            LayerSpec::ChannelConcat => "channel_concat",
            LayerSpec::ElementAdd => "element_add",
            LayerSpec::ElementMul => "element_mul",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            LayerSpec::ChannelConcat => None,
            LayerSpec::ElementAdd | LayerSpec::ElementMul => Some(2),
            _ => Some(1),
        }
    }

    /// Output shape for the given input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let err = |d: String| Error::shape(self.name(), d);
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(err(format!("expected {n} inputs, got {}", inputs.len())));
            }
        }
        let x = inputs.first().ok_or_else(|| err("no inputs".into()))?;
        let want_rank = |r: usize| {
            if x.len() == r {
                Ok(())
            } else {
                Err(err(format!("expected rank {r}, got {x:?}")))
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                dilation,
                padding,
            } => {
                want_rank(4)?;
                if x[1] != in_ch {
                    return Err(err(format!("expected {in_ch} channels, got {x:?}")));
                }
                if dilation == 0 {
                    return Err(err("dilation must be >= 1".into()));
                }
                let g = ConvGeom::new(stride, padding, dilation);
                match (g.out_len(x[2], kernel), g.out_len(x[3], kernel)) {
                    (Some(h), Some(w)) => Ok(vec![x[0], out_ch, h, w]),
                    _ => Err(err(format!("kernel does not fit {x:?}"))),
                }
            }
            LayerSpec::BatchNorm { ch } => {
                if (x.len() != 2 && x.len() != 4) || x[1] != ch {
                    return Err(err(format!("expected {ch} channels, got {x:?}")));
                }
                Ok(x.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(x.to_vec()),
            LayerSpec::FullyConnected { input, output } => {
                want_rank(2)?;
                if x[1] != input {
                    return Err(err(format!("expected {input} features, got {x:?}")));
                }
                Ok(vec![x[0], output])
            }
            LayerSpec::GlobalAvgPool => {
                want_rank(4)?;
                Ok(vec![x[0], x[1]])
            }
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                want_rank(4)?;
                let g = ConvGeom::new(stride, padding, 1);
                match (g.out_len(x[2], kernel), g.out_len(x[3], kernel)) {
                    (Some(h), Some(w)) => Ok(vec![x[0], x[1], h, w]),
                    _ => Err(err(format!("window does not fit {x:?}"))),
                }
            }
            LayerSpec::BilinearUpsample { factor } => {
                want_rank(4)?;
                Ok(vec![x[0], x[1], x[2] * factor, x[3] * factor])
            }
            LayerSpec::ChannelConcat => {
                want_rank(4)?;
                let mut c = 0;
                for s in inputs {
                    if s.len() != 4 || s[0] != x[0] || s[2] != x[2] || s[3] != x[3] {
                        return Err(err(format!("{s:?} vs {x:?}")));
                    }
                    c += s[1];
                }
                Ok(vec![x[0], c, x[2], x[3]])
            }
            LayerSpec::ElementAdd | LayerSpec::ElementMul => {
                if inputs[0] != inputs[1] {
                    return Err(err(format!("{:?} vs {:?}", inputs[0], inputs[1])));
                }
                Ok(x.to_vec())
            }
        }
    }

    /// Runs the layer. Weighted layers read their parameters under `path`.
    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        path: &str,
        inputs: &[&Var<T>],
    ) -> Result<Var<T>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| v.shape()).collect();
        self.output_shape(&shapes).map_err(|e| e.in_layer(path))?;
        let x = inputs[0];
        match *self {
            LayerSpec::Conv2d {
                out_ch,
                kernel,
                stride,
                dilation,
                padding,
                ..
            } => cx.conv(
                path,
                x,
                out_ch,
                kernel,
                ConvGeom::new(stride, padding, dilation),
                true,
            ),
            LayerSpec::BatchNorm { .. } => cx.batch_norm(path, x),
            LayerSpec::Relu => Ok(cx.graph.relu(x)),
            LayerSpec::Sigmoid => Ok(cx.graph.sigmoid(x)),
            LayerSpec::FullyConnected { output, .. } => cx.linear(path, x, output, true),
            LayerSpec::GlobalAvgPool => cx.graph.global_avg_pool(x),
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => cx
                .graph
                .max_pool2d(x, kernel, ConvGeom::new(stride, padding, 1)),
            LayerSpec::BilinearUpsample { factor } => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                cx.graph.upsample_bilinear(x, (h * factor, w * factor))
            }
            LayerSpec::ChannelConcat => cx.graph.concat_channels(inputs),
            LayerSpec::ElementAdd => cx.graph.add(inputs[0], inputs[1]),
            LayerSpec::ElementMul => cx.graph.mul(inputs[0], inputs[1]),
        }
        .map_err(|e| e.in_layer(path))
    }
}
