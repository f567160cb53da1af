//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every tensor listed in the header as raw
//! little-endian `f64` in header order.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{assemble_model, Model, ModelConfig, Variant};
use crate::nn::ParamKind;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"STNETCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream; enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub optimizer: Adam,
    pub rng: RngState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: Group,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kind: Option<ParamKind>,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    model: ModelConfig,
    train: TrainConfig,
    stats: ChannelStats,
    epoch: usize,
    step: u64,
    rng: RngState,
    adam_t: u64,
    adam_weight_decay: f64,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blobs: Vec<&[f64]> = Vec::new();
        for (name, p) in self.model.params.params() {
            entries.push(Entry {
                name: name.clone(),
                group: Group::Param,
                kind: Some(p.kind),
                shape: p.value.shape().to_vec(),
            });
            blobs.push(p.value.data());
        }
        for (name, b) in self.model.params.buffers() {
            entries.push(Entry {
                name: name.clone(),
                group: Group::Buffer,
                kind: None,
                shape: b.shape().to_vec(),
            });
            blobs.push(b.data());
        }
        for (group, map) in [(Group::AdamM, &self.optimizer.m), (Group::AdamV, &self.optimizer.v)] {
            for (name, data) in map {
                entries.push(Entry {
                    name: name.clone(),
                    group,
                    kind: None,
                    shape: vec![data.len()],
                });
                blobs.push(data);
            }
        }
        let header = Header {
            variant: self.model.variant,
            model: self.model.config.clone(),
            train: self.train.clone(),
            stats: self.model.stats,
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam_t: self.optimizer.t,
            adam_weight_decay: self.optimizer.weight_decay,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = blobs.iter().map(|b| b.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("malformed header: {e}")))?;
        let mut blob = &body[hlen..];

        let mut model = assemble_model(header.variant, &header.model, 0)
            .map_err(|e| bad(format!("cannot rebuild model from stored config: {e}")))?;
        model.stats = header.stats;
        let mut optimizer = Adam::new(header.adam_weight_decay);
        optimizer.t = header.adam_t;
        let mut seen_params = BTreeSet::new();
        let mut seen_buffers = BTreeSet::new();

        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if blob.len() < n * 8 {
                return Err(bad(format!("truncated data for `{}`", e.name)));
            }
            let data: Vec<f64> = blob[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[n * 8..];
            match e.group {
                Group::Param => {
                    let p = model
                        .params
                        .get_mut(&e.name)
                        .map_err(|_| bad(format!("unexpected parameter `{}`", e.name)))?;
                    if p.value.shape() != e.shape.as_slice() || Some(p.kind) != e.kind {
                        return Err(bad(format!(
                            "parameter `{}` is {:?} in the file but {:?} in the model",
                            e.name,
                            e.shape,
                            p.value.shape()
                        )));
                    }
                    p.value = Tensor::from_vec(&e.shape, data)?;
                    seen_params.insert(e.name.clone());
                }
                Group::Buffer => {
                    let b = model
                        .params
                        .buffer_mut(&e.name)
                        .map_err(|_| bad(format!("unexpected buffer `{}`", e.name)))?;
                    if b.shape() != e.shape.as_slice() {
                        return Err(bad(format!("buffer `{}` has shape {:?}, expected {:?}", e.name, e.shape, b.shape())));
                    }
                    *b = Tensor::from_vec(&e.shape, data)?;
                    seen_buffers.insert(e.name.clone());
                }
                Group::AdamM | Group::AdamV => {
                    let p = model
                        .params
                        .get(&e.name)
                        .map_err(|_| bad(format!("optimizer state for unknown parameter `{}`", e.name)))?;
                    if p.value.numel() != n {
                        return Err(bad(format!("optimizer state for `{}` has {n} entries", e.name)));
                    }
                    let map = if e.group == Group::AdamM { &mut optimizer.m } else { &mut optimizer.v };
                    map.insert(e.name.clone(), data);
                }
            }
        }
        if !blob.is_empty() {
            return Err(bad(format!("{} trailing bytes", blob.len())));
        }
        if seen_params.len() != model.params.len() {
            let missing: Vec<_> = model.params.params().map(|(n, _)| n).filter(|n| !seen_params.contains(*n)).collect();
            return Err(bad(format!("missing parameters {missing:?}")));
        }
        if seen_buffers.len() != model.params.buffers().count() {
            return Err(bad("missing normalization buffers".into()));
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fresh, untrained checkpoint for `variant`.
    pub fn initial(variant: Variant, model_cfg: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        use rand::SeedableRng;
        Ok(Checkpoint {
            model: assemble_model(variant, model_cfg, train.seed)?,
            train: train.clone(),
            epoch: 0,
            step: 0,
            optimizer: Adam::new(train.weight_decay),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(train.seed)),
        })
    }
}

/// Copies every `encoder.*` tensor of the checkpoint at `path` into `model`.
/// Returns the number of tensors copied.
pub fn load_pretrained_encoder(model: &mut Model, path: &Path) -> Result<usize> {
    let src = Checkpoint::load(path)?.model.params;
    let mut copied = 0;
    let names: Vec<String> = model.params.params().map(|(n, _)| n.clone()).filter(|n| n.starts_with("encoder.")).collect();
    for name in names {
        let from = src
            .get(&name)
            .map_err(|_| Error::Checkpoint(format!("{}: no pretrained tensor `{name}`", path.display())))?;
        let to = model.params.get_mut(&name)?;
        if from.value.shape() != to.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: pretrained `{name}` is {:?}, the encoder expects {:?}",
                path.display(),
                from.value.shape(),
                to.value.shape()
            )));
        }
        to.value = from.value.clone();
        copied += 1;
    }
    let buffers: Vec<String> = model.params.buffers().map(|(n, _)| n.clone()).filter(|n| n.starts_with("encoder.")).collect();
    for name in buffers {
        if let Ok(b) = src.buffer(&name) {
            *model.params.buffer_mut(&name)? = b.clone();
            copied += 1;
        }
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::data::synth_generate;
    use crate::decoder::DecoderConfig;
    use crate::loss::{DiceConfig, FocalConfig};
    use crate::train::train;
    use rand::RngCore;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::default().with_width(0.125),
            decoder: DecoderConfig { width: 16, reduction: 4 },
            ..ModelConfig::default()
        }
    }

    fn trained() -> Checkpoint {
        let tiles = synth_generate(0, 4, 32, 0.2).unwrap();
        let cfg = TrainConfig {
            max_steps: 2,
            batch_size: 2,
            variant: Variant::BaseSff,
            ..Default::default()
        };
        train(&cfg, &tiny(), &FocalConfig::default(), &DiceConfig::default(), &tiles, &[], None)
            .unwrap()
            .last
    }

    #[test]
    fn save_load_save_is_bitwise() {
        let ck = trained();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.optimizer.m.len(), ck.model.params.len());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = Checkpoint::initial(Variant::Full, &tiny(), &TrainConfig::default()).unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        back.save(&dir.path().join("y.ckpt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("y.ckpt")).unwrap());
    }

    #[test]
    fn refuses_unknown_version_and_garbage() {
        let mut bytes = Checkpoint::initial(Variant::Base, &tiny(), &TrainConfig::default()).unwrap().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
    }

    #[test]
    fn rejects_truncated_and_trailing_data() {
        let bytes = Checkpoint::initial(Variant::Base, &tiny(), &TrainConfig::default()).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn pretrained_encoder_is_copied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let donor = trained();
        donor.save(&path).unwrap();
        let mut m = assemble_model(Variant::Full, &tiny(), 99).unwrap();
        let n = load_pretrained_encoder(&mut m, &path).unwrap();
        assert!(n > 0);
        for (name, p) in m.params.params().filter(|(n, _)| n.starts_with("encoder.")) {
            assert_eq!(p.value, donor.model.params.get(name).unwrap().value);
        }
        let wide = ModelConfig {
            encoder: EncoderConfig::default().with_width(0.25),
            ..tiny()
        };
        let mut other = assemble_model(Variant::Full, &wide, 0).unwrap();
        assert!(matches!(load_pretrained_encoder(&mut other, &path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(3);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..20 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }
}
