//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] records every op of one forward pass on a tape. Parameters are
//! pulled from a [`ParamStore`] by name and become shared leaves, so a module
//! applied twice (the Siamese encoder) accumulates gradient from both uses.
//!
//! The graph doubles as the FLOP counter: each op tallies its cost under the
//! current scope. In shape-only mode no arithmetic runs at all.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Layout};
use crate::loss::{self, DiceConfig, FocalConfig};
use crate::nn::{conv_geom, NormUpdate, ParamStore, BN_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running stats are observed.
    Train,
    /// Running statistics in normalization layers.
    Eval,
    /// Shapes and FLOP counts only, no arithmetic.
    ShapeOnly,
}

/// Statistics a normalization op should use.
#[derive(Debug, Clone)]
pub enum NormStats {
    Batch { name: String },
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// FLOPs by category. One multiply-accumulate counts as two FLOPs;
/// element-wise work counts one per output element.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopTally {
    pub conv: u64,
    pub attention: u64,
    pub elementwise: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.conv + self.attention + self.elementwise
    }

    pub fn add(&mut self, other: &FlopTally) {
        self.conv += other.conv;
        self.attention += other.attention;
        self.elementwise += other.elementwise;
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Vec<f64>>,
    },
    HybridLoss {
        logits: Var,
        target: Tensor,
        focal: FocalConfig,
        dice: DiceConfig,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    norm_updates: Vec<NormUpdate>,
    scopes: Vec<String>,
    flops: BTreeMap<String, FlopTally>,
    kink_hash: Option<u64>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            norm_updates: Vec::new(),
            scopes: Vec::new(),
            flops: BTreeMap::new(),
            kink_hash: None,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    fn shape_only(&self) -> bool {
        self.mode == Mode::ShapeOnly
    }

    /// Records a fingerprint of every non-smooth decision (ReLU signs, pooling
    /// winners, probability clamps). Finite-difference checks compare
    /// fingerprints to detect perturbations that cross a kink.
    pub fn track_kinks(&mut self) {
        self.kink_hash = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kink_hash
    }

    fn mix(&mut self, word: u64) {
        if let Some(h) = self.kink_hash.as_mut() {
            *h = (*h ^ word).wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scopes.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    fn scope_key(&self) -> String {
        self.scopes.join(".")
    }

    fn tally(&mut self, conv: u64, attention: u64, elementwise: u64) {
        let key = self.scope_key();
        let t = self.flops.entry(key).or_default();
        t.conv += conv;
        t.attention += attention;
        t.elementwise += elementwise;
    }

    pub fn flops(&self) -> &BTreeMap<String, FlopTally> {
        &self.flops
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.norm_updates
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        let value = if self.shape_only() {
            Tensor::meta(value.shape())
        } else {
            value
        };
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated requests return the same leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = &self.store.get(name)?.value;
        let value = if self.shape_only() {
            Tensor::meta(p.shape())
        } else {
            p.clone()
        };
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn output(&self, shape: &[usize], compute: impl FnOnce() -> Vec<f64>) -> Tensor {
        if self.shape_only() {
            Tensor::meta(shape)
        } else {
            Tensor::from_vec(shape, compute()).expect("kernel produced wrong element count")
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape4(x)?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, c_in, k, k2] = ws[..] else {
            return Err(Error::shape(format!("conv weight must be 4-d, got {ws:?}")));
        };
        if k != k2 || c_in != xs.1 {
            return Err(Error::shape(format!(
                "conv weight {ws:?} does not accept input with {} channels",
                xs.1
            )));
        }
        if xs.2 + 2 * pad < k || xs.3 + 2 * pad < k {
            return Err(Error::shape(format!("input {xs:?} smaller than kernel {k}")));
        }
        let geom = conv_geom(xs, c_out, k, stride, pad);
        let (ho, wo) = geom.out_hw();
        let n = xs.0;
        let macs = (n * k * k * c_in * c_out * ho * wo) as u64;
        self.tally(2 * macs, 0, if b.is_some() { (n * c_out * ho * wo) as u64 } else { 0 });
        let value = self.output(&[n, c_out, ho, wo], || {
            kernels::conv2d_forward(
                self.value(x).data(),
                n,
                &geom,
                self.value(w).data(),
                b.map(|b| self.value(b).data()),
            )
        });
        Ok(self.push(value, Op::Conv { x, w, b, geom }))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape4(x)?;
        let ws = self.value(w).shape().to_vec();
        let [c, one, k, k2] = ws[..] else {
            return Err(Error::shape(format!("depthwise weight must be 4-d, got {ws:?}")));
        };
        if one != 1 || k != k2 || c != xs.1 {
            return Err(Error::shape(format!(
                "depthwise weight {ws:?} does not accept input with {} channels",
                xs.1
            )));
        }
        let geom = conv_geom(xs, c, k, 1, pad);
        let (ho, wo) = geom.out_hw();
        let n = xs.0;
        let macs = (n * k * k * c * ho * wo) as u64;
        self.tally(2 * macs, 0, if b.is_some() { (n * c * ho * wo) as u64 } else { 0 });
        let value = self.output(&[n, c, ho, wo], || {
            kernels::depthwise_forward(
                self.value(x).data(),
                n,
                &geom,
                self.value(w).data(),
                b.map(|b| self.value(b).data()),
            )
        });
        Ok(self.push(value, Op::Depthwise { x, w, b, geom }))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!("norm parameters do not match {c} channels")));
        }
        // normalize + affine: two ops per element
        self.tally(0, 0, 2 * (n * c * h * w) as u64);
        if self.shape_only() {
            let value = Tensor::meta(&[n, c, h, w]);
            return Ok(self.push(
                value,
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean: Vec::new(),
                    inv_std: Vec::new(),
                    batch_stats: false,
                },
            ));
        }
        let hw = h * w;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch { name } => {
                let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, hw);
                let m = (n * hw) as f64;
                let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.norm_updates.push(NormUpdate {
                    name,
                    mean: mean.clone(),
                    unbiased_var: var.iter().map(|v| v * correction).collect(),
                });
                (mean, var, true)
            }
            NormStats::Running { mean, var } => (mean, var, false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let out = kernels::affine_normalize(
            self.value(x).data(),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        self.tally(0, 0, self.value(x).numel() as u64);
        let value = self.output(&shape, || self.value(x).data().iter().map(|v| v.max(0.0)).collect());
        if self.kink_hash.is_some() {
            let words: Vec<u64> = value
                .data()
                .chunks(64)
                .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (((*v > 0.0) as u64) << i)))
                .collect();
            for w in words {
                self.mix(w);
            }
        }
        Ok(self.push(value, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        self.tally(0, 0, self.value(x).numel() as u64);
        let value = self.output(&shape, || self.value(x).data().iter().map(|&v| kernels::sigmoid(v)).collect());
        Ok(self.push(value, Op::Sigmoid(x)))
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "element-wise op on mismatched shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = va.numel() as u64;
        let shape = va.shape().to_vec();
        self.tally(0, 0, n);
        Ok(self.output(&shape, || {
            let (va, vb) = (self.value(a), self.value(b));
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x * gate` with `gate` of shape N×C×1×1 broadcast over space.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        if self.value(gate).shape() != [n, c, 1, 1] {
            return Err(Error::shape(format!(
                "channel gate {:?} does not match input {:?}",
                self.value(gate).shape(),
                [n, c, h, w]
            )));
        }
        self.tally(0, 0, (n * c * h * w) as u64);
        let value = self.output(&[n, c, h, w], || {
            let xv = self.value(x).data();
            let gv = self.value(gate).data();
            let mut out = xv.to_vec();
            for (plane, &g) in out.chunks_mut(h * w).zip(gv) {
                for v in plane {
                    *v *= g;
                }
            }
            out
        });
        Ok(self.push(value, Op::ScaleChannels { x, gate }))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape4(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)?;
        let mut channels = 0;
        for &p in parts {
            let s = self.shape4(p)?;
            if s.0 != first.0 || s.2 != first.2 || s.3 != first.3 {
                return Err(Error::shape(format!(
                    "concat inputs disagree on batch/spatial size: {first:?} vs {s:?}"
                )));
            }
            channels += s.1;
        }
        let (n, h, w) = (first.0, first.2, first.3);
        let value = self.output(&[n, channels, h, w], || {
            let mut out = Vec::with_capacity(n * channels * h * w);
            for s in 0..n {
                for &p in parts {
                    out.extend_from_slice(self.value(p).sample(s));
                }
            }
            out
        });
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// 3×3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        self.tally(0, 0, (n * c * oh * ow * 9) as u64);
        if self.shape_only() {
            let v = Tensor::meta(&[n, c, oh, ow]);
            return Ok(self.push(v, Op::MaxPool { x, arg: Vec::new() }));
        }
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), n * c, (h, w), 3, 2, 1);
        if self.kink_hash.is_some() {
            for &a in &arg {
                self.mix(a as u64);
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, arg }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        self.tally(0, 0, (n * c * h * w) as u64);
        let value = self.output(&[n, c, 1, 1], || {
            self.value(x)
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                .collect()
        });
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Non-overlapping k×k average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "average pool factor {k} does not divide spatial size {h}×{w}"
            )));
        }
        if k == 1 {
            return Ok(x);
        }
        self.tally(0, 0, (n * c * h * w) as u64);
        let value = self.output(&[n, c, h / k, w / k], || {
            kernels::avg_pool_forward(self.value(x).data(), n * c, (h, w), k)
        });
        Ok(self.push(value, Op::AvgPool { x, k }))
    }

    /// Half-pixel bilinear resampling to `(oh, ow)`.
    pub fn upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.shape4(x)?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("upsample target must be positive"));
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        // four taps, three adds: counted as 7 element ops per output
        self.tally(0, 0, 7 * (n * c * oh * ow) as u64);
        let value = self.output(&[n, c, oh, ow], || {
            kernels::bilinear_forward(self.value(x).data(), n * c, (h, w), (oh, ow))
        });
        Ok(self.push(value, Op::Upsample(x)))
    }

    /// Single-head scaled dot-product attention between feature maps.
    ///
    /// `q`: N×d×h×w supplies h·w query tokens; `k`, `v`: N×d×h'×w' supply the
    /// keys and values. Output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape4(q)?;
        let ks = self.shape4(k)?;
        let vs = self.shape4(v)?;
        if ks != vs || qs.0 != ks.0 || qs.1 != ks.1 {
            return Err(Error::shape(format!(
                "attention operands disagree: q {qs:?}, k {ks:?}, v {vs:?}"
            )));
        }
        let (n, d) = (qs.0, qs.1);
        let nq = qs.2 * qs.3;
        let nk = ks.2 * ks.3;
        // QKᵀ and AV are 2 FLOPs per MAC each; softmax counted per score.
        self.tally(0, (4 * n * nq * nk * d) as u64, (n * nq * nk) as u64);
        if self.shape_only() {
            let value = Tensor::meta(&[qs.0, qs.1, qs.2, qs.3]);
            return Ok(self.push(value, Op::Attention { q, k, v, probs: Vec::new() }));
        }
        let mut out = vec![0.0; n * d * nq];
        let mut probs = Vec::with_capacity(n);
        for s in 0..n {
            let p = kernels::attention_forward(
                nq,
                nk,
                d,
                self.value(q).sample(s),
                Layout::col_major(nq),
                self.value(k).sample(s),
                Layout::col_major(nk),
                self.value(v).sample(s),
                Layout::col_major(nk),
                &mut out[s * d * nq..(s + 1) * d * nq],
                Layout::col_major(nq),
            );
            probs.push(p);
        }
        let value = Tensor::from_vec(&[qs.0, qs.1, qs.2, qs.3], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, probs }))
    }

    /// Focal + dice loss of 2-channel logits (N×2×H×W) against binary
    /// targets (N×H×W with values in {0, 1}).
    pub fn hybrid_loss(&mut self, logits: Var, target: &Tensor, focal: FocalConfig, dice: DiceConfig) -> Result<Var> {
        let (n, c, h, w) = self.shape4(logits)?;
        if c != 2 || target.shape() != [n, h, w] {
            return Err(Error::shape(format!(
                "loss expects logits N×2×H×W and targets N×H×W, got {:?} and {:?}",
                [n, c, h, w],
                target.shape()
            )));
        }
        if self.shape_only() {
            let value = Tensor::meta(&[1]);
            return Ok(self.push(
                value,
                Op::HybridLoss {
                    logits,
                    target: target.clone(),
                    focal,
                    dice,
                },
            ));
        }
        let lv = self.value(logits);
        let value = loss::hybrid_forward(lv, target, &focal, &dice)?;
        if self.kink_hash.is_some() {
            let clamps = loss::clamp_pattern(lv);
            for w in clamps {
                self.mix(w);
            }
        }
        if !value.is_finite() {
            return Err(Error::numerical(format!("loss evaluated to {value}")));
        }
        let value = Tensor::from_vec(&[1], vec![value])?;
        Ok(self.push(
            value,
            Op::HybridLoss {
                logits,
                target: target.clone(),
                focal,
                dice,
            },
        ))
    }

    /// Scalar `Σ weights ⊙ x`, used to reduce a tensor for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let value = Tensor::from_vec(&[1], vec![s])?;
        Ok(self.push(value, Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape_only() {
            return Err(Error::config("cannot differentiate a shape-only graph"));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let go = gout.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            let shape = self.nodes[v.0].value.shape();
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(&data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape"));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let gr = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    go,
                    true,
                );
                acc(*x, gr.dx);
                acc(*w, gr.dw);
                if let Some(b) = b {
                    acc(*b, gr.db);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let gr = kernels::depthwise_backward(self.value(*x).data(), n, geom, self.value(*w).data(), go);
                acc(*x, gr.dx);
                acc(*w, gr.dw);
                if let Some(b) = b {
                    acc(*b, gr.db);
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
                let (n, c, h, w) = self.shape4(*x)?;
                let (dx, dg, db) = kernels::batch_norm_backward(
                    self.value(*x).data(),
                    n,
                    c,
                    h * w,
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    go,
                    *batch_stats,
                );
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, go.iter().zip(y).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, go.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect());
            }
            Op::Add(a, b) => {
                acc(*a, go.to_vec());
                acc(*b, go.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, go.to_vec());
                acc(*b, go.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, go.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, go.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::ScaleChannels { x, gate } => {
                let (_, _, h, w) = self.shape4(*x)?;
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                let mut dx = go.to_vec();
                let mut dg = vec![0.0; gv.len()];
                for (p, &g) in gv.iter().enumerate() {
                    let r = p * h * w..(p + 1) * h * w;
                    dg[p] = go[r.clone()].iter().zip(&xv[r.clone()]).map(|(a, b)| a * b).sum();
                    for d in &mut dx[r] {
                        *d *= g;
                    }
                }
                acc(*x, dx);
                acc(*gate, dg);
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let per_out = node.value.numel() / n;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).numel() / n;
                    let mut d = Vec::with_capacity(per * n);
                    for s in 0..n {
                        d.extend_from_slice(&go[s * per_out + offset..s * per_out + offset + per]);
                    }
                    offset += per;
                    acc(p, d);
                }
            }
            Op::MaxPool { x, arg } => {
                let (n, c, h, w) = self.shape4(*x)?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for o in 0..oh * ow {
                        dx[p * h * w + arg[p * oh * ow + o] as usize] += go[p * oh * ow + o];
                    }
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.shape4(*x)?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for g in go {
                    dx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, k } => {
                let (n, c, h, w) = self.shape4(*x)?;
                acc(*x, kernels::avg_pool_backward(go, n * c, (h, w), *k));
            }
            Op::Upsample(x) => {
                let (n, c, h, w) = self.shape4(*x)?;
                let (_, _, oh, ow) = node.value.dims4()?;
                acc(*x, kernels::bilinear_backward(go, n * c, (h, w), (oh, ow)));
            }
            Op::Attention { q, k, v, probs } => {
                let (n, d, qh, qw) = self.shape4(*q)?;
                let (_, _, kh, kw) = self.shape4(*k)?;
                let (nq, nk) = (qh * qw, kh * kw);
                let mut dq = vec![0.0; n * d * nq];
                let mut dk = vec![0.0; n * d * nk];
                let mut dv = vec![0.0; n * d * nk];
                for s in 0..n {
                    kernels::attention_backward(
                        nq,
                        nk,
                        d,
                        self.value(*q).sample(s),
                        Layout::col_major(nq),
                        self.value(*k).sample(s),
                        Layout::col_major(nk),
                        self.value(*v).sample(s),
                        Layout::col_major(nk),
                        &probs[s],
                        &go[s * d * nq..(s + 1) * d * nq],
                        Layout::col_major(nq),
                        &mut dq[s * d * nq..(s + 1) * d * nq],
                        &mut dk[s * d * nk..(s + 1) * d * nk],
                        &mut dv[s * d * nk..(s + 1) * d * nk],
                    );
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::HybridLoss {
                logits,
                target,
                focal,
                dice,
            } => {
                let mut d = loss::hybrid_backward(self.value(*logits), target, focal, dice)?;
                let scale = go[0];
                for v in &mut d {
                    *v *= scale;
                }
                acc(*logits, d);
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.data().iter().map(|w| w * go[0]).collect());
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter touched by the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), self.wrt(*v)))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }
}
