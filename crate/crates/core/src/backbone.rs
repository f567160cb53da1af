//! Weight-shared ResNet-18 style encoder.
//!
//! Both temporal streams run through the same [`Encoder`] against the same
//! parameter leaves, so sharing is structural: there is only one set of
//! weights to read or update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BiTemporalTile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{join, ConvNormAct, ConvSpec, Init, ParamStore};
use crate::tensor::Tensor;

/// Total down-sampling of the deepest stage.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub width_multiplier: f64,
    pub pretrained: bool,
    /// Checkpoint whose `encoder.*` tensors seed the encoder when `pretrained` is set.
    pub pretrained_weights: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![64, 128, 256, 512],
            stage_blocks: vec![2, 2, 2, 2],
            width_multiplier: 1.0,
            pretrained: false,
            pretrained_weights: String::new(),
        }
    }
}

impl EncoderConfig {
    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_blocks.len() != 4 {
            return Err(Error::config(format!(
                "encoder needs exactly 4 stages, got {} channel widths and {} block counts",
                self.stage_channels.len(),
                self.stage_blocks.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.stage_blocks.contains(&0) {
            return Err(Error::config("stage channels and block counts must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.pretrained && self.pretrained_weights.is_empty() {
            return Err(Error::config("pretrained encoder requested without `pretrained_weights`"));
        }
        Ok(())
    }

    /// Stage widths after applying the width multiplier. Shrunk widths are
    /// rounded to the nearest multiple of 8 (at least 8).
    pub fn effective_channels(&self) -> Vec<usize> {
        if self.width_multiplier == 1.0 {
            return self.stage_channels.clone();
        }
        self.stage_channels
            .iter()
            .map(|&c| {
                let scaled = c as f64 * self.width_multiplier;
                ((scaled / 8.0).round() as usize).max(1) * 8
            })
            .collect()
    }
}

/// Four stage outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: ConvNormAct,
    conv2: ConvNormAct,
    downsample: Option<ConvNormAct>,
}

impl BasicBlock {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.conv2.forward(g, y)?;
        let shortcut = match &self.downsample {
            Some(ds) => ds.forward(g, x)?,
            None => x,
        };
        let y = g.add(y, shortcut)?;
        g.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    channels: Vec<usize>,
    stem: ConvNormAct,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    /// Registers the encoder's parameters in `store` under `prefix`.
    pub fn new<R: rand::Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.effective_channels();
        let conv = |c_in, c_out, k, s| ConvSpec::new(c_in, c_out, k).stride(s).init(Init::FanOutNormal);
        let stem = ConvNormAct::new(store, rng, &join(prefix, "stem"), conv(3, channels[0], 7, 2), true)?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = channels[0];
        for (i, (&c, &blocks)) in channels.iter().zip(&cfg.stage_blocks).enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let name = join(prefix, &format!("layer{}.{b}", i + 1));
                let downsample = if stride != 1 || c_in != c {
                    Some(ConvNormAct::new(store, rng, &join(&name, "downsample"), conv(c_in, c, 1, stride), false)?)
                } else {
                    None
                };
                stage.push(BasicBlock {
                    conv1: ConvNormAct::new(store, rng, &join(&name, "conv1"), conv(c_in, c, 3, stride), true)?,
                    conv2: ConvNormAct::new(store, rng, &join(&name, "conv2"), conv(c, c, 3, 1), false)?,
                    downsample,
                });
                c_in = c;
            }
            stages.push(stage);
        }
        Ok(Encoder {
            channels,
            stem,
            stages,
        })
    }

    /// Stage widths of the produced pyramid.
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    /// Runs one temporal stream: N×3×H×W → four stage outputs.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<[Var; 4]> {
        let (_, c, h, w) = g.value(x).dims4()?;
        check_input(c, h, w)?;
        let y = self.stem.forward(g, x)?;
        let mut y = g.max_pool(y)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, y)?;
            }
            out.push(y);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

pub(crate) fn check_input(c: usize, h: usize, w: usize) -> Result<()> {
    if c != 3 {
        return Err(Error::shape(format!("encoder expects 3 input channels, got {c}")));
    }
    if h % MAX_STRIDE != 0 {
        return Err(Error::shape(format!("height {h} is not divisible by {MAX_STRIDE}")));
    }
    if w % MAX_STRIDE != 0 {
        return Err(Error::shape(format!("width {w} is not divisible by {MAX_STRIDE}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("image must be non-empty"));
    }
    Ok(())
}

/// Builds a standalone encoder with its own parameter store.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoder::new(cfg, &mut store, &mut rng, "encoder")?;
    Ok((enc, store))
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.shape()[..] {
        [c, h, w] => {
            check_input(c, h, w)?;
            image.clone().reshape(&[1, c, h, w])
        }
        _ => Err(Error::shape(format!("image must be 3×H×W, got {:?}", image.shape()))),
    }
}

fn unbatch(t: &Tensor) -> Tensor {
    let s = t.shape();
    t.clone().reshape(&s[1..]).expect("leading batch axis of 1")
}

/// Inference-mode pyramid of a single 3×H×W image.
pub fn extract_pyramid(enc: &Encoder, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
    let x = as_batch(image)?;
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.input(x);
    let levels = enc.forward(&mut g, x)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| unbatch(g.value(v))).collect(),
    })
}

/// Runs both images of a pair through the shared encoder.
pub fn extract_bitemporal(
    enc: &Encoder,
    store: &ParamStore,
    pair: &BiTemporalTile,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    if pair.t1.shape() != pair.t2.shape() {
        return Err(Error::CoRegistration(format!(
            "T1 is {:?} but T2 is {:?}",
            pair.t1.shape(),
            pair.t2.shape()
        )));
    }
    let x1 = as_batch(&pair.t1)?;
    let x2 = as_batch(&pair.t2)?;
    let mut g = Graph::new(store, Mode::Eval);
    let (x1, x2) = (g.input(x1), g.input(x2));
    let p1 = enc.forward(&mut g, x1)?;
    let p2 = enc.forward(&mut g, x2)?;
    let collect = |levels: [Var; 4]| FeaturePyramid {
        levels: levels.iter().map(|&v| unbatch(g.value(v))).collect(),
    };
    Ok((collect(p1), collect(p2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn default_channels() {
        let (enc, _) = build_encoder(&EncoderConfig::default(), 0).unwrap();
        assert_eq!(enc.channels(), &[64, 128, 256, 512]);
    }

    #[test]
    fn quarter_width_channels() {
        let cfg = EncoderConfig::default().with_width(0.25);
        assert_eq!(cfg.effective_channels(), vec![16, 32, 64, 128]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = EncoderConfig::default().with_width(0.25);
        let (_, a) = build_encoder(&cfg, 7).unwrap();
        let (_, b) = build_encoder(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_encoder(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_stage_count() {
        let cfg = EncoderConfig {
            stage_channels: vec![8, 16, 32],
            ..EncoderConfig::default()
        };
        assert!(matches!(build_encoder(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = EncoderConfig::default().with_width(0.25);
        let (enc, store) = build_encoder(&cfg, 0).unwrap();
        let p = extract_pyramid(&enc, &store, &image(64, 64, 1)).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4], vec![128, 2, 2]]
        );
    }

    #[test]
    fn indivisible_input_names_dimension() {
        let cfg = EncoderConfig::default().with_width(0.25);
        let (enc, store) = build_encoder(&cfg, 0).unwrap();
        let err = extract_pyramid(&enc, &store, &image(100, 64, 1)).unwrap_err();
        assert!(err.to_string().contains("height 100"), "{err}");
        let err = extract_pyramid(&enc, &store, &image(64, 100, 1)).unwrap_err();
        assert!(err.to_string().contains("width 100"), "{err}");
    }
}
