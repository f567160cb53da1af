//! Spatial feature fusion: a shallow change representation attends over
//! itself, guided by the upsampled deepest-scale representation.
//!
//! ```text
//! G = [up(high), low]
//! Q = Wq G,  K = Wk G,  V = Wv low          (1×1 projections, d channels)
//! Z = softmax(Q Kᵀ / √d) V
//! out = low + Wo Z
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::{self, Layout};
use crate::nn::{join, Conv2d, ConvSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SffConfig {
    /// Projection width d; 0 uses the low-level channel count.
    pub attention_dim: usize,
    /// Average-pool factor applied to keys and values (1 = exact attention).
    pub key_downsample: usize,
    /// Upper bound on key tokens per attention call.
    pub max_tokens: usize,
}

impl Default for SffConfig {
    fn default() -> Self {
        SffConfig {
            attention_dim: 0,
            key_downsample: 1,
            max_tokens: 4096,
        }
    }
}

impl SffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.key_downsample == 0 || self.max_tokens == 0 {
            return Err(Error::config("key_downsample and max_tokens must be positive"));
        }
        Ok(())
    }
}

/// Projection layers of one block. Parameters live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SffBlock {
    pub c_low: usize,
    pub c_high: usize,
    pub dim: usize,
    key_downsample: usize,
    max_tokens: usize,
    wq: Conv2d,
    wk: Conv2d,
    wv: Conv2d,
    wo: Conv2d,
}

impl SffBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_low: usize,
        c_high: usize,
        cfg: &SffConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = if cfg.attention_dim == 0 { c_low } else { cfg.attention_dim };
        let g = c_low + c_high;
        Ok(SffBlock {
            c_low,
            c_high,
            dim: d,
            key_downsample: cfg.key_downsample,
            max_tokens: cfg.max_tokens,
            wq: Conv2d::new(store, rng, join(name, "query"), ConvSpec::new(g, d, 1))?,
            wk: Conv2d::new(store, rng, join(name, "key"), ConvSpec::new(g, d, 1).no_bias())?,
            wv: Conv2d::new(store, rng, join(name, "value"), ConvSpec::new(c_low, d, 1))?,
            wo: Conv2d::new(store, rng, join(name, "out"), ConvSpec::new(d, c_low, 1))?,
        })
    }

    /// Name of the output projection weight, e.g. for zeroing it.
    pub fn output_weight(&self) -> String {
        join(&self.wo.name, "weight")
    }

    pub fn output_bias(&self) -> String {
        join(&self.wo.name, "bias")
    }

    /// `low`: N×C_low×h×w, `high`: N×C_high×h'×w' with h' ≤ h, w' ≤ w.
    pub fn forward(&self, g: &mut Graph, low: Var, high: Var) -> Result<Var> {
        let (n, cl, h, w) = g.value(low).dims4()?;
        let (nh, ch, hh, wh) = g.value(high).dims4()?;
        if cl != self.c_low || ch != self.c_high || n != nh {
            return Err(Error::shape(format!(
                "spatial fusion expects {}+{} channels, got low {cl} and high {ch} (batch {n} vs {nh})",
                self.c_low, self.c_high
            )));
        }
        if hh > h || wh > w {
            return Err(Error::shape(format!(
                "guidance {hh}×{wh} is larger than the target scale {h}×{w}"
            )));
        }
        let f = self.key_downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Resolution(format!(
                "key downsample factor {f} does not divide {h}×{w}"
            )));
        }
        let keys = (h / f) * (w / f);
        if keys > self.max_tokens {
            return Err(Error::Resolution(format!(
                "{keys} key tokens at {h}×{w} exceed the limit of {}; raise key_downsample",
                self.max_tokens
            )));
        }
        let up = g.upsample(high, h, w)?;
        let guide = g.concat(&[up, low])?;
        let q = self.wq.forward(g, guide)?;
        let k = self.wk.forward(g, guide)?;
        let v = self.wv.forward(g, low)?;
        let k = g.avg_pool(k, f)?;
        let v = g.avg_pool(v, f)?;
        let z = g.attention(q, k, v)?;
        let o = self.wo.forward(g, z)?;
        g.add(low, o)
    }
}

fn batched(t: &Tensor) -> Result<Tensor> {
    match t.shape()[..] {
        [c, h, w] => t.clone().reshape(&[1, c, h, w]),
        _ => Err(Error::shape(format!("expected C×h×w features, got {:?}", t.shape()))),
    }
}

/// Half-pixel bilinear resize of C×h×w features to `target_h`×`target_w`.
pub fn upsample_bilinear(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!("expected C×h×w features, got {:?}", x.shape())));
    };
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("upsample target must be positive"));
    }
    if target_h < h || target_w < w {
        return Err(Error::shape(format!(
            "upsample target {target_h}×{target_w} is smaller than input {h}×{w}"
        )));
    }
    let out = kernels::bilinear_forward(x.data(), c, (h, w), (target_h, target_w));
    Tensor::from_vec(&[c, target_h, target_w], out)
}

fn token_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [n, d] => Ok((n, d)),
        _ => Err(Error::shape(format!("{what} must be a token matrix, got {:?}", t.shape()))),
    }
}

fn check_tokens(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (nq, dq) = token_matrix(q, "Q")?;
    let (nk, dk) = token_matrix(k, "K")?;
    let (nv, dv) = token_matrix(v, "V")?;
    if nq == 0 || nk == 0 {
        return Err(Error::shape("attention needs at least one token"));
    }
    if dq == 0 || dq != dk || nk != nv || dv == 0 {
        return Err(Error::shape(format!(
            "attention operands disagree: Q {nq}×{dq}, K {nk}×{dk}, V {nv}×{dv}"
        )));
    }
    if !(q.all_finite() && k.all_finite() && v.all_finite()) {
        return Err(Error::numerical("attention inputs contain non-finite values"));
    }
    Ok((nq, nk, dq, dv))
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √d)`, Nq×Nk.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (nk, d) = token_matrix(k, "K")?;
    let v = Tensor::zeros(&[nk, d.max(1)]);
    let (nq, nk, d, _) = check_tokens(q, k, &v)?;
    let mut z = vec![0.0; nq * d];
    let probs = kernels::attention_forward(
        nq,
        nk,
        d,
        q.data(),
        Layout::row_major(d),
        k.data(),
        Layout::row_major(d),
        v.data(),
        Layout::row_major(d),
        &mut z,
        Layout::row_major(d),
    );
    Tensor::from_vec(&[nq, nk], probs)
}

/// `Z = softmax(Q Kᵀ / √d) V` on row-major token matrices.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (nq, nk, _, dv) = check_tokens(q, k, v)?;
    let mut z = vec![0.0; nq * dv];
    let probs = attention_weights(q, k)?;
    kernels::gemm(
        nq,
        nk,
        dv,
        1.0,
        probs.data(),
        Layout::row_major(nk),
        v.data(),
        Layout::row_major(dv),
        0.0,
        &mut z,
        Layout::row_major(dv),
    );
    let z = Tensor::from_vec(&[nq, dv], z)?;
    if !z.all_finite() {
        return Err(Error::numerical("attention output is not finite"));
    }
    Ok(z)
}

/// Inference-mode fusion of one (low, high) pair.
pub fn sff_forward(low: &Tensor, high: &Tensor, block: &SffBlock, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new(store, Mode::Eval);
    let l = g.input(batched(low)?);
    let h = g.input(batched(high)?);
    let out = block.forward(&mut g, l, h)?;
    g.value(out).clone().reshape(low.shape())
}

/// Max relative error of analytic against finite-difference gradients of a
/// random weighting of the block output, over both inputs and all
/// parameters in `store`.
pub fn sff_backward_check(
    low: &Tensor,
    high: &Tensor,
    block: &SffBlock,
    store: &ParamStore,
    epsilon: f64,
) -> Result<f64> {
    let inputs = [batched(low)?, batched(high)?];
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(store, &inputs, |g, v| block.forward(g, v[0], v[1]), opts)?;
    Ok(report.max_rel_error)
}
