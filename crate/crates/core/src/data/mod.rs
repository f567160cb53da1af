//! Bi-temporal tiles: ingestion from disk, image I/O, normalization
//! statistics, tiling, augmentation and the synthetic scene generator.

mod augment;
mod synth;
mod tiling;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub use augment::{augment, Augmentation};
pub use synth::{split_sizes, synth_generate, synth_scene, write_synth_dataset, ShapeKind, SynthScene, SynthShape};
pub use tiling::{tile_pair, tile_rasters, tile_count, RasterTile};

/// Co-registered image pair with an optional change mask.
///
/// Images are 3×S×S with values in [0, 1]; standardization with
/// [`ChannelStats`] happens when batches are assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTemporalTile {
    pub name: String,
    pub t1: Tensor,
    pub t2: Tensor,
    pub mask: Option<BinaryMask>,
}

impl BiTemporalTile {
    pub fn new(name: impl Into<String>, t1: Tensor, t2: Tensor, mask: Option<BinaryMask>) -> Result<Self> {
        let name = name.into();
        let [3, h, w] = t1.shape()[..] else {
            return Err(Error::shape(format!("{name}: T1 must be 3×H×W, got {:?}", t1.shape())));
        };
        if t2.shape() != t1.shape() {
            return Err(Error::CoRegistration(format!(
                "{name}: T1 is {:?} but T2 is {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        if let Some(m) = &mask {
            if m.dims() != (h, w) {
                return Err(Error::CoRegistration(format!(
                    "{name}: images are {h}×{w} but the mask is {}×{}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(BiTemporalTile { name, t1, t2, mask })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t1.shape()[1], self.t1.shape()[2])
    }

    pub fn check_model_input(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(Error::shape(format!(
                "{}: tile {h}×{w} is not divisible by {MAX_STRIDE}",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// Per-channel mean and standard deviation of [0, 1] images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl ChannelStats {
    /// Statistics over both frames of every tile.
    pub fn compute(tiles: &[BiTemporalTile]) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::Ingestion("cannot compute statistics of an empty split".into()));
        }
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for t in tiles {
            let hw = t.t1.numel() / 3;
            for img in [&t.t1, &t.t2] {
                for c in 0..3 {
                    for &v in &img.data()[c * hw..(c + 1) * hw] {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            count += 2 * hw;
        }
        let n = count as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let hw = image.numel() / 3;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / hw;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Any nonzero label value marks a changed pixel.
pub fn normalize_mask(raw: &GrayImage) -> BinaryMask {
    let (w, h) = raw.dimensions();
    BinaryMask::from_vec(h as usize, w as usize, raw.as_raw().clone()).expect("buffer matches dimensions")
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized buffer")
}

/// Inverse of [`rgb_to_tensor`], rounding to the nearest 8-bit level.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = t.shape()[..] else {
        return Err(Error::shape(format!("expected a 3×H×W image, got {:?}", t.shape())));
    };
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn mask_to_image(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_error(path, e))?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| image_error(path, e))?.to_luma8())
}

pub fn read_image_tensor(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&read_rgb(path)?))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(normalize_mask(&read_gray(path)?))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub fn write_png_gray(path: &Path, img: &GrayImage) -> Result<()> {
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_error(path, e))
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_png_gray(path, &mask_to_image(mask))
}

/// Writes a tile as `A/name`, `B/name` and (if present) `label/name` under `dir`.
pub fn write_tile(dir: &Path, file_name: &str, tile: &BiTemporalTile) -> Result<()> {
    write_png_rgb(&dir.join("A").join(file_name), &tensor_to_rgb(&tile.t1)?)?;
    write_png_rgb(&dir.join("B").join(file_name), &tensor_to_rgb(&tile.t2)?)?;
    if let Some(m) = &tile.mask {
        write_mask(&dir.join("label").join(file_name), m)?;
    }
    Ok(())
}

fn list_files(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Ingestion(format!("missing directory {}", dir.display())),
        _ => Error::io(dir, e),
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Directory of one split: `root/split`.
pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// Loads `root/split/{A,B,label}` in lexicographic filename order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<BiTemporalTile>> {
    let dir = split_dir(root, split);
    let (a_dir, b_dir, l_dir) = (dir.join("A"), dir.join("B"), dir.join("label"));
    let names = list_files(&a_dir)?;
    for other in [&b_dir, &l_dir] {
        for extra in list_files(other)? {
            if names.binary_search(&extra).is_err() {
                return Err(Error::Ingestion(format!(
                    "{} has no counterpart in {}",
                    other.join(&extra).display(),
                    a_dir.display()
                )));
            }
        }
    }
    let mut tiles = Vec::with_capacity(names.len());
    for name in names {
        let (pa, pb, pl) = (a_dir.join(&name), b_dir.join(&name), l_dir.join(&name));
        for p in [&pb, &pl] {
            if !p.is_file() {
                return Err(Error::Ingestion(format!("missing counterpart file {}", p.display())));
            }
        }
        let t1 = read_image_tensor(&pa)?;
        let t2 = read_image_tensor(&pb)?;
        let mask = read_mask(&pl)?;
        tiles.push(BiTemporalTile::new(name, t1, t2, Some(mask))?);
    }
    Ok(tiles)
}
