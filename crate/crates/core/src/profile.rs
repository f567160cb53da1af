//! Parameter and FLOP accounting.
//!
//! FLOPs are counted analytically on a shape-only pass: a multiply-accumulate
//! is 2 FLOPs, normalization / activation / resampling work is one FLOP per
//! output element. The report also carries the halved (MAC) figure and the
//! dense-only figure that leaves element-wise work out.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FlopTally, Graph, Mode};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub variant: String,
    pub input_shape: Vec<usize>,
    pub params_total: usize,
    pub params_by_module: BTreeMap<String, usize>,
    /// 2 FLOPs per multiply-accumulate, element-wise work included.
    pub flops_total: u64,
    /// `flops_total / 2`, for tables that count MACs.
    pub flops_halved: u64,
    /// Convolution and attention only.
    pub flops_dense: u64,
    pub flops_by_module: BTreeMap<String, FlopTally>,
}

impl ProfileReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn module_of(path: &str) -> String {
    match path.split('.').next() {
        Some("") | None => "other".to_string(),
        Some(top) => top.to_string(),
    }
}

pub fn count_params(store: &ParamStore) -> usize {
    store.numel()
}

pub fn params_by_module(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, p) in store.params() {
        *out.entry(module_of(name)).or_insert(0) += p.value.numel();
    }
    out
}

/// Per-module FLOPs of one forward pass on a `[N,] 3×H×W` input pair.
pub fn count_flops(model: &Model, input_shape: &[usize]) -> Result<BTreeMap<String, FlopTally>> {
    let shape = match input_shape {
        [3, h, w] => [1, 3, *h, *w],
        [n, 3, h, w] => [*n, 3, *h, *w],
        _ => return Err(Error::shape(format!("input shape must be [N,] 3×H×W, got {input_shape:?}"))),
    };
    if shape[2] % crate::backbone::MAX_STRIDE != 0 || shape[3] % crate::backbone::MAX_STRIDE != 0 {
        return Err(Error::shape(format!(
            "input {}×{} is not divisible by {}",
            shape[2],
            shape[3],
            crate::backbone::MAX_STRIDE
        )));
    }
    let mut g = Graph::new(&model.params, Mode::ShapeOnly);
    let x1 = g.input(Tensor::meta(&shape));
    let x2 = g.input(Tensor::meta(&shape));
    model.net.forward(&mut g, x1, x2)?;
    let mut out: BTreeMap<String, FlopTally> = BTreeMap::new();
    for (scope, t) in g.flops() {
        out.entry(module_of(scope)).or_default().add(t);
    }
    Ok(out)
}

pub fn profile(model: &Model, input_shape: &[usize]) -> Result<ProfileReport> {
    let flops_by_module = count_flops(model, input_shape)?;
    let mut all = FlopTally::default();
    for t in flops_by_module.values() {
        all.add(t);
    }
    let params_by_module = params_by_module(&model.params);
    Ok(ProfileReport {
        variant: model.variant.to_string(),
        input_shape: input_shape.to_vec(),
        params_total: params_by_module.values().sum(),
        params_by_module,
        flops_total: all.total(),
        flops_halved: all.total() / 2,
        flops_dense: all.conv + all.attention,
        flops_by_module,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::decoder::DecoderConfig;
    use crate::model::{assemble_model, ModelConfig, Variant};
    use crate::nn::{Conv2d, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::default().with_width(0.125),
            decoder: DecoderConfig { width: 16, reduction: 4 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_pointwise_conv() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut store, &mut rng, "c", ConvSpec::new(64, 2, 1)).unwrap();
        assert_eq!(count_params(&store), 130);
        let mut g = Graph::new(&store, Mode::ShapeOnly);
        let x = g.input(Tensor::meta(&[1, 64, 64, 64]));
        conv.forward(&mut g, x).unwrap();
        let t = g.flops()[""];
        assert_eq!(t.conv, 2 * 64 * 2 * 64 * 64);
        assert_eq!(t.conv, 1_048_576);
        assert_eq!(t.elementwise, 2 * 64 * 64);
    }

    #[test]
    fn totals_are_sums_of_modules() {
        for v in Variant::ALL {
            let m = assemble_model(v, &tiny(), 0).unwrap();
            let r = profile(&m, &[3, 64, 64]).unwrap();
            assert_eq!(r.params_total, m.params.numel());
            let sum: u64 = r.flops_by_module.values().map(|t| t.total()).sum();
            assert_eq!(sum, r.flops_total);
            assert_eq!(r.flops_halved, r.flops_total / 2);
            assert!(r.flops_dense < r.flops_total);
            let mut keys: Vec<&str> = r.flops_by_module.keys().map(|s| s.as_str()).collect();
            keys.retain(|k| k.starts_with("sff"));
            assert_eq!(keys.len(), if v.uses_sff() { 3 } else { 0 });
            assert!(!r.flops_by_module.contains_key("other"));
        }
    }

    #[test]
    fn scaling_with_input_side() {
        let m = assemble_model(Variant::Full, &tiny(), 0).unwrap();
        let sum = |shape: &[usize]| {
            let mut t = FlopTally::default();
            for v in count_flops(&m, shape).unwrap().values() {
                t.add(v);
            }
            t
        };
        let (a, b) = (sum(&[3, 64, 64]), sum(&[3, 128, 128]));
        // The channel-attention MLP runs on pooled vectors, so its cost is
        // independent of the input side: two 64↔16 layers.
        let cam = 2 * 2 * 64 * 16;
        assert_eq!(b.conv - cam, 4 * (a.conv - cam));
        assert_eq!(b.attention, 16 * a.attention);
        let batch = sum(&[2, 3, 64, 64]);
        assert_eq!(batch.total(), 2 * a.total());
        assert_eq!(params_by_module(&m.params).values().sum::<usize>(), count_params(&m.params));
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = assemble_model(Variant::Base, &tiny(), 0).unwrap();
        assert!(count_flops(&m, &[3, 60, 64]).is_err());
        assert!(count_flops(&m, &[4, 64, 64]).is_err());
        assert!(count_flops(&m, &[64, 64]).is_err());
    }
}
