//! Parameter storage and the small set of layers every block is built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NormStats, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Role of a trainable tensor; decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Trainable parameters and non-trainable buffers, keyed by module path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, kind });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Folds a batch-statistics observation into the running buffers.
    pub fn apply_norm_update(&mut self, update: &NormUpdate) -> Result<()> {
        let mean = self.buffer_mut(&format!("{}.running_mean", update.name))?;
        for (r, m) in mean.data_mut().iter_mut().zip(&update.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let var = self.buffer_mut(&format!("{}.running_var", update.name))?;
        for (r, v) in var.data_mut().iter_mut().zip(&update.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        Ok(())
    }
}

/// Batch statistics observed in a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with `std = sqrt(2 / fan_out)`, zero bias; for ReLU backbones.
    FanOutNormal,
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    FanInUniform,
}

impl Init {
    fn weight<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        let receptive: usize = shape[2..].iter().product();
        match self {
            Init::FanOutNormal => {
                let fan_out = shape[0] * receptive;
                Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng)
            }
            Init::FanInUniform => {
                let bound = 1.0 / ((shape[1] * receptive) as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, rng)
            }
        }
    }

    fn bias<R: Rng + ?Sized>(self, weight_shape: &[usize], rng: &mut R) -> Tensor {
        let receptive: usize = weight_shape[2..].iter().product();
        match self {
            Init::FanOutNormal => Tensor::zeros(&[weight_shape[0]]),
            Init::FanInUniform => {
                let bound = 1.0 / ((weight_shape[1] * receptive) as f64).sqrt();
                Tensor::uniform(&[weight_shape[0]], -bound, bound, rng)
            }
        }
    }
}

/// Shape and init options of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            bias: true,
            init: Init::FanInUniform,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: impl Into<String>,
        spec: ConvSpec,
    ) -> Result<Self> {
        let name = name.into();
        let shape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        store.insert(join(&name, "weight"), spec.init.weight(&shape, rng), ParamKind::Weight)?;
        if spec.bias {
            store.insert(join(&name, "bias"), spec.init.bias(&shape, rng), ParamKind::Bias)?;
        }
        Ok(Conv2d { name, spec })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&join(&self.name, "weight"))?;
        let b = if self.spec.bias {
            Some(g.param(&join(&self.name, "bias"))?)
        } else {
            None
        };
        g.conv2d(x, w, b, self.spec.stride, self.spec.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: impl Into<String>,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let name = name.into();
        let shape = [channels, 1, kernel, kernel];
        store.insert(join(&name, "weight"), Init::FanInUniform.weight(&shape, rng), ParamKind::Weight)?;
        Ok(DepthwiseConv2d {
            name,
            channels,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&join(&self.name, "weight"))?;
        g.depthwise_conv2d(x, w, None, self.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        store.insert(join(&name, "weight"), Tensor::full(&[channels], 1.0), ParamKind::NormScale)?;
        store.insert(join(&name, "bias"), Tensor::zeros(&[channels]), ParamKind::NormShift)?;
        store.insert_buffer(join(&name, "running_mean"), Tensor::zeros(&[channels]));
        store.insert_buffer(join(&name, "running_var"), Tensor::full(&[channels], 1.0));
        Ok(BatchNorm2d { name, channels })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&join(&self.name, "weight"))?;
        let beta = g.param(&join(&self.name, "bias"))?;
        let stats = if g.is_training() {
            NormStats::Batch {
                name: self.name.clone(),
            }
        } else {
            NormStats::Running {
                mean: g.store().buffer(&join(&self.name, "running_mean"))?.data().to_vec(),
                var: g.store().buffer(&join(&self.name, "running_var"))?.data().to_vec(),
            }
        };
        g.batch_norm(x, gamma, beta, stats)
    }
}

/// Depth-wise separable convolution: 3×3 depth-wise, 1×1 point-wise, then
/// batch norm and ReLU. Neither convolution has a bias; the norm shift covers it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeparableConv {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
    pub norm: BatchNorm2d,
}

impl SeparableConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: DepthwiseConv2d::new(store, rng, join(name, "dw"), c_in, 3)?,
            pointwise: Conv2d::new(store, rng, join(name, "pw"), ConvSpec::new(c_in, c_out, 1).no_bias())?,
            norm: BatchNorm2d::new(store, join(name, "bn"), c_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        let y = self.pointwise.forward(g, y)?;
        let y = self.norm.forward(g, y)?;
        g.relu(y)
    }
}

/// Conv → batch norm → optional ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
    pub relu: bool,
}

impl ConvNormAct {
    /// The convolution carries no bias; the norm shift replaces it.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvNormAct {
            conv: Conv2d::new(store, rng, join(name, "conv"), spec.no_bias())?,
            norm: BatchNorm2d::new(store, join(name, "bn"), spec.c_out)?,
            relu,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        if self.relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}

pub(crate) fn conv_geom(x_shape: (usize, usize, usize, usize), c_out: usize, kernel: usize, stride: usize, pad: usize) -> ConvGeom {
    let (_, c, h, w) = x_shape;
    ConvGeom {
        c_in: c,
        c_out,
        kernel,
        stride,
        pad,
        h,
        w,
    }
}
