//! Full network assembly and its ablation variants.
//!
//! ```text
//! T1, T2 ─ shared encoder ─> (R1_i, R2_i), i = 1..4
//! fusion_i(R1_i, R2_i)                   TFF, or concat(R1, R2, R1−R2) → 1×1 conv
//! scales 1..3: sff_i(rep_i, rep_4)       variants with cross-scale attention
//! decoder(rep_1..rep_4) → logits 2×H×W
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoder, EncoderConfig};
use crate::data::{BiTemporalTile, ChannelStats};
use crate::decoder::{binarize, to_probability, ChangeProbabilityMap, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::mask::BinaryMask;
use crate::nn::{ConvNormAct, ConvSpec, ParamStore};
use crate::spatial_fusion::{SffBlock, SffConfig};
use crate::temporal_fusion::TffBlock;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "base+tff")]
    BaseTff,
    #[serde(rename = "base+sff")]
    BaseSff,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::BaseTff, Variant::BaseSff, Variant::Full];

    pub fn uses_tff(self) -> bool {
        matches!(self, Variant::BaseTff | Variant::Full)
    }

    pub fn uses_sff(self) -> bool {
        matches!(self, Variant::BaseSff | Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseTff => "base+tff",
            Variant::BaseSff => "base+sff",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (expected base, base+tff, base+sff or full)")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub sff: SffConfig,
}

/// Difference-and-concatenate fusion without gating.
#[derive(Debug, Clone, PartialEq)]
struct BaseFusion {
    conv: ConvNormAct,
}

impl BaseFusion {
    fn forward(&self, g: &mut Graph, r1: Var, r2: Var) -> Result<Var> {
        let d = g.sub(r1, r2)?;
        let cat = g.concat(&[r1, r2, d])?;
        self.conv.forward(g, cat)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fusion {
    Gated(TffBlock),
    Plain(BaseFusion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StNet {
    pub variant: Variant,
    pub encoder: Encoder,
    fusions: Vec<Fusion>,
    sff: Vec<SffBlock>,
    pub decoder: Decoder,
}

impl StNet {
    pub fn new(variant: Variant, cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&cfg.encoder, store, &mut rng, "encoder")?;
        let channels = encoder.channels().to_vec();
        let mut fusions = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("fusion{}", i + 1);
            fusions.push(if variant.uses_tff() {
                Fusion::Gated(TffBlock::new(store, &mut rng, &name, c)?)
            } else {
                Fusion::Plain(BaseFusion {
                    conv: ConvNormAct::new(store, &mut rng, &name, ConvSpec::new(3 * c, c, 1), true)?,
                })
            });
        }
        let deepest = channels[3];
        let mut sff = Vec::new();
        if variant.uses_sff() {
            for (i, &c) in channels[..3].iter().enumerate() {
                sff.push(SffBlock::new(store, &mut rng, &format!("sff{}", i + 1), c, deepest, &cfg.sff)?);
            }
        }
        let decoder = Decoder::new(store, &mut rng, "decoder", &channels, &cfg.decoder)?;
        Ok(StNet {
            variant,
            encoder,
            fusions,
            sff,
            decoder,
        })
    }

    pub fn tff_blocks(&self) -> usize {
        self.fusions.iter().filter(|f| matches!(f, Fusion::Gated(_))).count()
    }

    pub fn sff_blocks(&self) -> usize {
        self.sff.len()
    }

    /// Logits N×2×H×W for standardized N×3×H×W frames.
    pub fn forward(&self, g: &mut Graph, x1: Var, x2: Var) -> Result<Var> {
        let s1 = g.value(x1).dims4()?;
        let s2 = g.value(x2).dims4()?;
        if s1 != s2 {
            return Err(Error::CoRegistration(format!("T1 is {s1:?} but T2 is {s2:?}")));
        }
        g.push_scope("encoder");
        let p1 = self.encoder.forward(g, x1);
        let p2 = p1.and_then(|p1| Ok((p1, self.encoder.forward(g, x2)?)));
        g.pop_scope();
        let (p1, p2) = p2?;

        let mut reps = Vec::with_capacity(4);
        for (i, f) in self.fusions.iter().enumerate() {
            g.push_scope(format!("fusion{}", i + 1));
            let r = match f {
                Fusion::Gated(b) => b.forward(g, p1[i], p2[i]),
                Fusion::Plain(b) => b.forward(g, p1[i], p2[i]),
            };
            g.pop_scope();
            reps.push(r?);
        }
        let deepest = reps[3];
        for (i, block) in self.sff.iter().enumerate() {
            g.push_scope(format!("sff{}", i + 1));
            let r = block.forward(g, reps[i], deepest);
            g.pop_scope();
            reps[i] = r?;
        }
        self.decoder.forward(g, &reps)
    }
}

/// Network structure, parameters and the input standardization it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub net: StNet,
    pub params: ParamStore,
    pub stats: ChannelStats,
}

pub fn assemble_model(variant: Variant, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut params = ParamStore::new();
    let net = StNet::new(variant, cfg, &mut params, seed)?;
    Ok(Model {
        variant,
        config: cfg.clone(),
        net,
        params,
        stats: ChannelStats::default(),
    })
}

/// Standardized N×3×H×W batches of both frames.
pub fn stack_inputs(tiles: &[&BiTemporalTile], stats: &ChannelStats) -> Result<(Tensor, Tensor)> {
    if tiles.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let dims = tiles[0].dims();
    let mut a = Vec::with_capacity(tiles.len());
    let mut b = Vec::with_capacity(tiles.len());
    for t in tiles {
        if t.dims() != dims {
            return Err(Error::shape(format!(
                "batch mixes tile sizes {:?} and {:?}",
                dims,
                t.dims()
            )));
        }
        t.check_model_input()?;
        a.push(stats.apply(&t.t1));
        b.push(stats.apply(&t.t2));
    }
    let a_refs: Vec<&Tensor> = a.iter().collect();
    let b_refs: Vec<&Tensor> = b.iter().collect();
    Ok((Tensor::stack(&a_refs)?, Tensor::stack(&b_refs)?))
}

impl Model {
    /// Inference-mode logits for a batch of tiles, N×2×H×W.
    pub fn logits(&self, tiles: &[&BiTemporalTile]) -> Result<Tensor> {
        let (a, b) = stack_inputs(tiles, &self.stats)?;
        let mut g = Graph::new(&self.params, Mode::Eval);
        let (x1, x2) = (g.input(a), g.input(b));
        let out = self.net.forward(&mut g, x1, x2)?;
        let logits = g.value(out).clone();
        if !logits.all_finite() {
            return Err(Error::numerical("model produced non-finite logits"));
        }
        Ok(logits)
    }

    /// Probability map and its binarization for one tile.
    pub fn predict_tile(&self, tile: &BiTemporalTile) -> Result<(ChangeProbabilityMap, BinaryMask)> {
        let logits = self.logits(&[tile])?;
        let s = logits.shape().to_vec();
        let prob = to_probability(&logits.reshape(&s[1..])?)?;
        let mask = binarize(&prob);
        Ok((prob, mask))
    }
}
