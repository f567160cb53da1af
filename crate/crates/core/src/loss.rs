//! Hybrid training objective: focal loss plus soft dice loss.
//!
//! Focal loss is averaged over every pixel of the batch. Dice is computed per
//! image as the mean of the per-class soft dice coefficients over the
//! (unchanged, changed) classes, and the per-image losses are averaged.

use serde::{Deserialize, Serialize};

use crate::decoder::ChangeProbabilityMap;
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.2,
            gamma: 2.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config(format!(
                "focal alpha must lie in [0, 1] and gamma be ≥ 0, got {} and {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiceConfig {
    pub smooth: f64,
}

impl Default for DiceConfig {
    fn default() -> Self {
        DiceConfig { smooth: 1.0 }
    }
}

impl DiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smooth.is_nan() || self.smooth < 0.0 {
            return Err(Error::config(format!("dice smoothing must be ≥ 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Per-pixel focal term for changed-class probability `p` and label `y`.
fn focal_term(p: f64, y: bool, cfg: &FocalConfig) -> f64 {
    let p = clamp_prob(p);
    let p_hat = if y { p } else { 1.0 - p };
    -cfg.alpha * (1.0 - p_hat).powf(cfg.gamma) * p_hat.ln()
}

/// d(focal_term)/dp, zero where the clamp is active.
fn focal_grad(p: f64, y: bool, cfg: &FocalConfig) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let p_hat = if y { p } else { 1.0 - p };
    let q = 1.0 - p_hat;
    let modulating = if cfg.gamma == 0.0 {
        0.0
    } else {
        -cfg.gamma * q.powf(cfg.gamma - 1.0) * p_hat.ln()
    };
    let d_phat = -cfg.alpha * (modulating + q.powf(cfg.gamma) / p_hat);
    if y {
        d_phat
    } else {
        -d_phat
    }
}

/// Soft dice coefficient from accumulated sums.
fn dice_coeff(inter: f64, sum_p: f64, sum_g: f64, smooth: f64) -> f64 {
    let den = sum_p + sum_g + smooth;
    if den == 0.0 {
        1.0
    } else {
        (2.0 * inter + smooth) / den
    }
}

struct DiceSums {
    inter: [f64; 2],
    sum_p: [f64; 2],
    sum_g: [f64; 2],
}

impl DiceSums {
    fn collect(p_unchanged: &[f64], p_changed: &[f64], target: &[f64]) -> Self {
        let mut s = DiceSums {
            inter: [0.0; 2],
            sum_p: [0.0; 2],
            sum_g: [0.0; 2],
        };
        for ((&p0, &p1), &y) in p_unchanged.iter().zip(p_changed).zip(target) {
            s.inter[0] += p0 * (1.0 - y);
            s.inter[1] += p1 * y;
            s.sum_p[0] += p0;
            s.sum_p[1] += p1;
            s.sum_g[0] += 1.0 - y;
            s.sum_g[1] += y;
        }
        s
    }

    fn loss(&self, smooth: f64) -> f64 {
        let d0 = dice_coeff(self.inter[0], self.sum_p[0], self.sum_g[0], smooth);
        let d1 = dice_coeff(self.inter[1], self.sum_p[1], self.sum_g[1], smooth);
        1.0 - 0.5 * (d0 + d1)
    }

    /// d(dice_c)/d(p_{k,c}) for a pixel with ground truth `g` in class c.
    fn coeff_grad(&self, class: usize, g: f64, smooth: f64) -> f64 {
        let den = self.sum_p[class] + self.sum_g[class] + smooth;
        if den == 0.0 {
            return 0.0;
        }
        (2.0 * g * den - (2.0 * self.inter[class] + smooth)) / (den * den)
    }
}

/// Mean focal loss over all pixels. `prob_changed` is H×W.
pub fn focal_loss(prob_changed: &Tensor, target: &BinaryMask, cfg: &FocalConfig) -> Result<f64> {
    let [h, w] = prob_changed.shape()[..] else {
        return Err(Error::shape(format!(
            "changed-probability map must be H×W, got {:?}",
            prob_changed.shape()
        )));
    };
    target.expect_dims((h, w))?;
    let total: f64 = prob_changed
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| focal_term(p, y != 0, cfg))
        .sum();
    Ok(total / (h * w) as f64)
}

/// One minus the class-averaged soft dice coefficient.
pub fn dice_loss(prob: &ChangeProbabilityMap, target: &BinaryMask, cfg: &DiceConfig) -> Result<f64> {
    target.expect_dims(prob.dims())?;
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    Ok(DiceSums::collect(prob.unchanged(), prob.changed(), &y).loss(cfg.smooth))
}

/// Focal + dice loss of a single 2×H×W logit map.
pub fn hybrid_loss(logits: &Tensor, target: &BinaryMask, focal: &FocalConfig, dice: &DiceConfig) -> Result<f64> {
    let batched = logits.clone().reshape(&batched_shape(logits)?)?;
    let t = BinaryMask::stack(&[target])?;
    hybrid_forward(&batched, &t, focal, dice)
}

/// Gradient of [`hybrid_loss`] with respect to the 2×H×W logits.
pub fn hybrid_loss_grad(logits: &Tensor, target: &BinaryMask, focal: &FocalConfig, dice: &DiceConfig) -> Result<Tensor> {
    let batched = logits.clone().reshape(&batched_shape(logits)?)?;
    let t = BinaryMask::stack(&[target])?;
    let g = hybrid_backward(&batched, &t, focal, dice)?;
    Tensor::from_vec(logits.shape(), g)
}

fn batched_shape(logits: &Tensor) -> Result<[usize; 4]> {
    match logits.shape()[..] {
        [2, h, w] => Ok([1, 2, h, w]),
        _ => Err(Error::shape(format!(
            "logits must be 2×H×W, got {:?}",
            logits.shape()
        ))),
    }
}

/// Per-pixel (unchanged, changed) probabilities of one sample's logits.
fn sample_probs(sample: &[f64], hw: usize) -> (Vec<f64>, Vec<f64>) {
    let (l0, l1) = sample.split_at(hw);
    let p0 = l0.iter().zip(l1).map(|(a, b)| sigmoid(a - b)).collect();
    let p1 = l0.iter().zip(l1).map(|(a, b)| sigmoid(b - a)).collect();
    (p0, p1)
}

/// Batched loss: logits N×2×H×W, targets N×H×W in {0, 1}.
pub(crate) fn hybrid_forward(logits: &Tensor, target: &Tensor, focal: &FocalConfig, dice: &DiceConfig) -> Result<f64> {
    let (n, _, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut focal_sum = 0.0;
    let mut dice_sum = 0.0;
    for s in 0..n {
        let (p0, p1) = sample_probs(logits.sample(s), hw);
        let y = target.sample(s);
        focal_sum += p1
            .iter()
            .zip(y)
            .map(|(&p, &y)| focal_term(p, y > 0.5, focal))
            .sum::<f64>();
        dice_sum += DiceSums::collect(&p0, &p1, y).loss(dice.smooth);
    }
    Ok(focal_sum / (n * hw) as f64 + dice_sum / n as f64)
}

pub(crate) fn hybrid_backward(logits: &Tensor, target: &Tensor, focal: &FocalConfig, dice: &DiceConfig) -> Result<Vec<f64>> {
    let (n, _, h, w) = logits.dims4()?;
    let hw = h * w;
    let focal_scale = 1.0 / (n * hw) as f64;
    let dice_scale = 1.0 / n as f64;
    let mut grad = vec![0.0; logits.numel()];
    for s in 0..n {
        let (p0, p1) = sample_probs(logits.sample(s), hw);
        let y = target.sample(s);
        let sums = DiceSums::collect(&p0, &p1, y);
        let out = &mut grad[s * 2 * hw..(s + 1) * 2 * hw];
        for k in 0..hw {
            let yk = y[k];
            // dL/dp1 with p0 = 1 - p1.
            let d_focal = focal_scale * focal_grad(p1[k], yk > 0.5, focal);
            let d_dice = -0.5
                * dice_scale
                * (sums.coeff_grad(1, yk, dice.smooth) - sums.coeff_grad(0, 1.0 - yk, dice.smooth));
            let dp1 = d_focal + d_dice;
            let slope = p1[k] * p0[k];
            out[k] = -dp1 * slope;
            out[hw + k] = dp1 * slope;
        }
    }
    Ok(grad)
}

/// Bit pattern of which pixels sit in the probability clamp region.
pub(crate) fn clamp_pattern(logits: &Tensor) -> Vec<u64> {
    let Ok((n, _, h, w)) = logits.dims4() else {
        return Vec::new();
    };
    let hw = h * w;
    let mut words = Vec::new();
    for s in 0..n {
        let (_, p1) = sample_probs(logits.sample(s), hw);
        for chunk in p1.chunks(64) {
            words.push(chunk.iter().enumerate().fold(0u64, |acc, (i, &p)| {
                acc | ((!(PROB_EPS..=1.0 - PROB_EPS).contains(&p) as u64) << i)
            }));
        }
    }
    words
}
