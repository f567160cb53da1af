//! Decoder head: per-scale projection, upsample to stride 4, concatenation,
//! channel attention, 2-class classifier and final ×4 upsample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::sigmoid;
use crate::mask::BinaryMask;
use crate::nn::{join, Conv2d, ConvSpec, ParamStore};
use crate::tensor::Tensor;

/// Ratio between the input resolution and the finest decoder scale.
pub const HEAD_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Common width D of every projected scale.
    pub width: usize,
    /// Channel-attention reduction ratio r.
    pub reduction: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 64,
            reduction: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        let total = self.width * scales;
        if self.width == 0 || self.reduction == 0 || total % self.reduction != 0 {
            return Err(Error::config(format!(
                "reduction ratio {} must divide the concatenated width {total}",
                self.reduction
            )));
        }
        Ok(())
    }
}

/// Per-pixel (unchanged, changed) probabilities, stored 2×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProbabilityMap {
    probs: Tensor,
}

impl ChangeProbabilityMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.probs.shape()[1], self.probs.shape()[2])
    }

    pub fn unchanged(&self) -> &[f64] {
        let hw = self.probs.numel() / 2;
        &self.probs.data()[..hw]
    }

    pub fn changed(&self) -> &[f64] {
        let hw = self.probs.numel() / 2;
        &self.probs.data()[hw..]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.probs
    }

    /// Builds a map from explicit probabilities, checking the simplex.
    pub fn from_tensor(probs: Tensor) -> Result<Self> {
        let [2, _, _] = probs.shape()[..] else {
            return Err(Error::shape(format!("probability map must be 2×H×W, got {:?}", probs.shape())));
        };
        let hw = probs.numel() / 2;
        let (a, b) = probs.data().split_at(hw);
        for (p0, p1) in a.iter().zip(b) {
            if !(0.0..=1.0).contains(p0) || !(0.0..=1.0).contains(p1) || (p0 + p1 - 1.0).abs() > 1e-6 {
                return Err(Error::numerical(format!("invalid probability pair ({p0}, {p1})")));
            }
        }
        Ok(ChangeProbabilityMap { probs })
    }
}

/// Two-class softmax of 2×H×W logits.
pub fn to_probability(logits: &Tensor) -> Result<ChangeProbabilityMap> {
    let [2, h, w] = logits.shape()[..] else {
        return Err(Error::shape(format!("logits must be 2×H×W, got {:?}", logits.shape())));
    };
    if !logits.all_finite() {
        return Err(Error::numerical("logits contain non-finite values"));
    }
    let hw = h * w;
    let (l0, l1) = logits.data().split_at(hw);
    let mut data = Vec::with_capacity(2 * hw);
    data.extend(l0.iter().zip(l1).map(|(a, b)| sigmoid(a - b)));
    data.extend(l0.iter().zip(l1).map(|(a, b)| sigmoid(b - a)));
    Ok(ChangeProbabilityMap {
        probs: Tensor::from_vec(&[2, h, w], data)?,
    })
}

/// Changed where `p_changed > p_unchanged`; ties stay unchanged.
pub fn binarize(prob: &ChangeProbabilityMap) -> BinaryMask {
    let (h, w) = prob.dims();
    let data = prob
        .unchanged()
        .iter()
        .zip(prob.changed())
        .map(|(p0, p1)| (p1 > p0) as u8)
        .collect();
    BinaryMask::from_vec(h, w, data).expect("dims match")
}

/// Squeeze-excitation channel attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CamBlock {
    pub channels: usize,
    pub reduction: usize,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl CamBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(CamBlock {
            channels,
            reduction,
            fc1: Conv2d::new(store, rng, join(name, "fc1"), ConvSpec::new(channels, hidden, 1))?,
            fc2: Conv2d::new(store, rng, join(name, "fc2"), ConvSpec::new(hidden, channels, 1))?,
        })
    }

    /// Per-channel gate in (0, 1), N×C×1×1.
    pub fn gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let s = g.global_avg_pool(x)?;
        let s = self.fc1.forward(g, s)?;
        let s = g.relu(s)?;
        let s = self.fc2.forward(g, s)?;
        g.sigmoid(s)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gate = self.gate(g, x)?;
        g.scale_channels(x, gate)
    }
}

/// Inference-mode channel attention on a single C×h×w tensor.
pub fn cam_forward(x: &Tensor, cam: &CamBlock, store: &ParamStore) -> Result<Tensor> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!("expected C×h×w features, got {:?}", x.shape())));
    };
    let mut g = Graph::new(store, Mode::Eval);
    let v = g.input(x.clone().reshape(&[1, c, h, w])?);
    let out = cam.forward(&mut g, v)?;
    g.value(out).clone().reshape(&[c, h, w])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub width: usize,
    projections: Vec<Conv2d>,
    pub cam: CamBlock,
    classifier: Conv2d,
}

impl Decoder {
    /// `channels` lists the width of each incoming scale, finest first.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: &[usize],
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate(channels.len())?;
        let d = cfg.width;
        let projections = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, rng, join(name, &format!("proj{}", i + 1)), ConvSpec::new(c, d, 1)))
            .collect::<Result<Vec<_>>>()?;
        let total = d * channels.len();
        Ok(Decoder {
            width: d,
            cam: CamBlock::new(store, rng, &join(name, "cam"), total, cfg.reduction)?,
            classifier: Conv2d::new(store, rng, join(name, "classifier"), ConvSpec::new(total, 2, 1))?,
            projections,
        })
    }

    pub fn scales(&self) -> usize {
        self.projections.len()
    }

    pub fn classifier_name(&self) -> &str {
        &self.classifier.name
    }

    /// Logits N×2×H×W where H×W is [`HEAD_STRIDE`] times the finest scale.
    pub fn forward(&self, g: &mut Graph, reps: &[Var]) -> Result<Var> {
        if reps.len() != self.projections.len() {
            return Err(Error::shape(format!(
                "decoder expects {} scales, got {}",
                self.projections.len(),
                reps.len()
            )));
        }
        let (_, _, h, w) = g.value(reps[0]).dims4()?;
        g.push_scope("decoder");
        let mut parts = Vec::with_capacity(reps.len());
        for (proj, &r) in self.projections.iter().zip(reps) {
            let y = proj.forward(g, r)?;
            parts.push(g.upsample(y, h, w)?);
        }
        let cat = g.concat(&parts)?;
        let att = self.cam.forward(g, cat)?;
        let logits = self.classifier.forward(g, att)?;
        let out = g.upsample(logits, h * HEAD_STRIDE, w * HEAD_STRIDE);
        g.pop_scope();
        out
    }
}

/// Inference-mode decoding of per-scale C_i×h_i×w_i representations.
pub fn decode(reps: &[Tensor], decoder: &Decoder, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new(store, Mode::Eval);
    let mut vars = Vec::with_capacity(reps.len());
    for r in reps {
        let [c, h, w] = r.shape()[..] else {
            return Err(Error::shape(format!("representation must be C×h×w, got {:?}", r.shape())));
        };
        vars.push(g.input(r.clone().reshape(&[1, c, h, w])?));
    }
    let out = decoder.forward(&mut g, &vars)?;
    let s = g.value(out).shape().to_vec();
    g.value(out).clone().reshape(&s[1..])
}
