//! Temporal feature fusion: cross-temporal gating of same-scale features.
//!
//! ```text
//! Rc  = R1 − R2
//! Rc1 = ψ1([R1, Rc])         Rc2 = ψ2([R2, Rc])
//! W1  = σ(φ1(Rc1))           W2  = σ(φ2(Rc2))
//! Rt  = ψ3([W1 ⊙ R1, W2 ⊙ R2])
//! ```
//!
//! ψ is a depth-wise separable convolution mapping 2C → C channels, φ a 1×1
//! convolution C → C, and `[·, ·]` channel concatenation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{join, Conv2d, ConvSpec, ParamStore, SeparableConv};
use crate::tensor::Tensor;

/// Fused change features at one pyramid scale (C×h×w).
pub type ChangeRepresentation = Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TffBlock {
    pub channels: usize,
    fuse1: SeparableConv,
    fuse2: SeparableConv,
    gate1: Conv2d,
    gate2: Conv2d,
    fuse_out: SeparableConv,
}

/// Intermediate gates, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct TffVars {
    pub difference: Var,
    pub gate1: Var,
    pub gate2: Var,
    pub output: Var,
}

impl TffBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(TffBlock {
            channels,
            fuse1: SeparableConv::new(store, rng, &join(name, "fuse1"), 2 * c, c)?,
            fuse2: SeparableConv::new(store, rng, &join(name, "fuse2"), 2 * c, c)?,
            gate1: Conv2d::new(store, rng, join(name, "gate1"), ConvSpec::new(c, c, 1))?,
            gate2: Conv2d::new(store, rng, join(name, "gate2"), ConvSpec::new(c, c, 1))?,
            fuse_out: SeparableConv::new(store, rng, &join(name, "fuse_out"), 2 * c, c)?,
        })
    }

    pub fn forward_detailed(&self, g: &mut Graph, r1: Var, r2: Var) -> Result<TffVars> {
        let (s1, s2) = (g.value(r1).dims4()?, g.value(r2).dims4()?);
        if s1 != s2 {
            return Err(Error::shape(format!("temporal features differ in shape: {s1:?} vs {s2:?}")));
        }
        if s1.1 != self.channels {
            return Err(Error::shape(format!(
                "fusion block expects {} channels, got {}",
                self.channels, s1.1
            )));
        }
        let rc = g.sub(r1, r2)?;
        let a = g.concat(&[r1, rc])?;
        let rc1 = self.fuse1.forward(g, a)?;
        let b = g.concat(&[r2, rc])?;
        let rc2 = self.fuse2.forward(g, b)?;
        let w1 = self.gate1.forward(g, rc1)?;
        let w1 = g.sigmoid(w1)?;
        let w2 = self.gate2.forward(g, rc2)?;
        let w2 = g.sigmoid(w2)?;
        let g1 = g.mul(w1, r1)?;
        let g2 = g.mul(w2, r2)?;
        let cat = g.concat(&[g1, g2])?;
        let output = self.fuse_out.forward(g, cat)?;
        Ok(TffVars {
            difference: rc,
            gate1: w1,
            gate2: w2,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, r1: Var, r2: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, r1, r2)?.output)
    }
}

/// Signed element-wise difference `R1 − R2`.
pub fn coarse_difference(r1: &Tensor, r2: &Tensor) -> Result<Tensor> {
    r1.zip_map(r2, |a, b| a - b)
}

/// Accepts C×h×w or N×C×h×w.
fn batched(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        }
        4 => Ok(t.clone()),
        _ => Err(Error::shape(format!("expected C×h×w features, got {:?}", t.shape()))),
    }
}

fn restore_rank(out: &Tensor, like: &Tensor) -> Tensor {
    out.clone().reshape(like.shape()).expect("fusion preserves shape")
}

/// Inference-mode fusion of one pair of same-scale features.
pub fn tff_forward(r1: &Tensor, r2: &Tensor, block: &TffBlock, store: &ParamStore) -> Result<ChangeRepresentation> {
    let mut g = Graph::new(store, Mode::Eval);
    let a = g.input(batched(r1)?);
    let b = g.input(batched(r2)?);
    let out = block.forward(&mut g, a, b)?;
    Ok(restore_rank(g.value(out), r1))
}

/// Max relative error between analytic and central finite-difference
/// gradients of a random weighting of the fused output, over both inputs
/// and every block parameter (training-mode normalization).
pub fn tff_backward_check(
    r1: &Tensor,
    r2: &Tensor,
    block: &TffBlock,
    store: &ParamStore,
    epsilon: f64,
) -> Result<f64> {
    let inputs = [batched(r1)?, batched(r2)?];
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(store, &inputs, |g, v| block.forward(g, v[0], v[1]), opts)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, seed: u64) -> (TffBlock, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = TffBlock::new(&mut store, &mut rng, "tff", c).unwrap();
        (block, store)
    }

    fn feat(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[c, h, w], 1.0, &mut rng)
    }

    #[test]
    fn difference_basics() {
        let a = feat(2, 3, 3, 1);
        assert_eq!(coarse_difference(&a, &a).unwrap().max_abs(), 0.0);
        let ones = Tensor::full(&[2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2, 2]);
        assert_eq!(coarse_difference(&ones, &zeros).unwrap(), ones);
        assert!(coarse_difference(&ones, &Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn difference_matches_loop() {
        let a = feat(3, 4, 5, 2);
        let b = feat(3, 4, 5, 3);
        let d = coarse_difference(&a, &b).unwrap();
        for i in 0..a.numel() {
            assert_eq!(d.data()[i], a.data()[i] - b.data()[i]);
        }
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_output() {
        let (block, mut store) = setup(4, 0);
        for (_, p) in store.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.input(batched(&feat(4, 4, 4, 1)).unwrap());
        let b = g.input(batched(&feat(4, 4, 4, 2)).unwrap());
        let v = block.forward_detailed(&mut g, a, b).unwrap();
        assert!(g.value(v.gate1).data().iter().all(|&x| x == 0.5));
        assert!(g.value(v.gate2).data().iter().all(|&x| x == 0.5));
        assert_eq!(g.value(v.output).max_abs(), 0.0);
    }

    #[test]
    fn equal_inputs_equal_gates() {
        let (block, store) = setup(4, 3);
        // fuse1 and fuse2 differ, so force them equal to make the symmetry exact.
        let mut store = store;
        let names: Vec<String> = store.params().map(|(k, _)| k.clone()).filter(|k| k.contains("fuse1")).collect();
        for n in names {
            let v = store.get(&n).unwrap().value.clone();
            store.get_mut(&n.replace("fuse1", "fuse2")).unwrap().value = v;
        }
        for gate in ["weight", "bias"] {
            let v = store.get(&format!("tff.gate1.{gate}")).unwrap().value.clone();
            store.get_mut(&format!("tff.gate2.{gate}")).unwrap().value = v;
        }
        let x = feat(4, 4, 4, 9);
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.input(batched(&x).unwrap());
        let b = g.input(batched(&x).unwrap());
        let v = block.forward_detailed(&mut g, a, b).unwrap();
        assert_eq!(g.value(v.difference).max_abs(), 0.0);
        assert_eq!(g.value(v.gate1), g.value(v.gate2));
    }

    #[test]
    fn gates_in_open_unit_interval_and_shape_preserved() {
        let (block, store) = setup(8, 5);
        let mut g = Graph::new(&store, Mode::Train);
        let a = g.input(batched(&feat(8, 6, 6, 1)).unwrap());
        let b = g.input(batched(&feat(8, 6, 6, 2)).unwrap());
        let v = block.forward_detailed(&mut g, a, b).unwrap();
        for gate in [v.gate1, v.gate2] {
            assert!(g.value(gate).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
        assert_eq!(g.value(v.output).shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (block, store) = setup(4, 0);
        let err = tff_forward(&feat(3, 4, 4, 1), &feat(3, 4, 4, 2), &block, &store).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_inputs_have_finite_gradients() {
        let (block, store) = setup(4, 1);
        let z = Tensor::zeros(&[4, 4, 4]);
        let err = tff_backward_check(&z, &z, &block, &store, 1e-5).unwrap();
        assert!(err.is_finite());
    }
}
