//! Deterministic synthetic change-detection scenes.
//!
//! Each scene has a textured background shared by both frames. Between one
//! and four non-overlapping rectangles or ellipses appear in T2 only or
//! disappear from T1; these are the recorded changes. A few persistent shapes
//! sit in both frames unchanged, and every frame independently receives a
//! global brightness/contrast shift and pixel speckle that the mask ignores.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_tile, BiTemporalTile, Split};
use crate::backbone::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

const BRIGHTNESS: f64 = 0.15;
const CONTRAST: f64 = 0.15;
const SPECKLE_STD: f64 = 0.02;
const MAX_CHANGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// Axis-aligned shape with centre and half extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub color: [f64; 3],
    /// Recorded in the mask (present in exactly one frame).
    pub changed: bool,
    /// For changed shapes: present in T2 (added) rather than T1 (removed).
    pub added: bool,
}

impl SynthShape {
    /// Whether the centre of pixel `(r, c)` lies inside the shape.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 + 0.5 - self.cy) / self.ry;
        let dx = (c as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn bbox_overlaps(&self, other: &SynthShape, margin: f64) -> bool {
        (self.cy - other.cy).abs() < self.ry + other.ry + margin
            && (self.cx - other.cx).abs() < self.rx + other.rx + margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub tile: BiTemporalTile,
    pub shapes: Vec<SynthShape>,
}

fn check_args(size: usize, change_rate: f64) -> Result<()> {
    if size == 0 || size % MAX_STRIDE != 0 {
        return Err(Error::config(format!("synthetic size {size} must be a positive multiple of {MAX_STRIDE}")));
    }
    if !(change_rate > 0.0 && change_rate < 1.0) {
        return Err(Error::config(format!("change rate must lie in (0, 1), got {change_rate}")));
    }
    Ok(())
}

fn vivid_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| {
        if rng.random_bool(0.5) {
            rng.random_range(0.02..0.22)
        } else {
            rng.random_range(0.78..0.98)
        }
    })
}

fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    area: f64,
    placed: &[SynthShape],
    changed: bool,
) -> Option<SynthShape> {
    let s = size as f64;
    let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse };
    let aspect: f64 = rng.random_range(0.6..1.6);
    let (ry, rx) = match kind {
        ShapeKind::Rectangle => ((area / aspect).sqrt() / 2.0, (area * aspect).sqrt() / 2.0),
        ShapeKind::Ellipse => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r / aspect.sqrt(), r * aspect.sqrt())
        }
    };
    let (ry, rx) = (ry.clamp(2.0, s / 2.0 - 1.0), rx.clamp(2.0, s / 2.0 - 1.0));
    for _ in 0..60 {
        let cy = rng.random_range(ry + 0.5..s - ry - 0.5);
        let cx = rng.random_range(rx + 0.5..s - rx - 0.5);
        let shape = SynthShape {
            kind,
            cy,
            cx,
            ry,
            rx,
            color: [0.0; 3],
            changed,
            added: false,
        };
        if placed.iter().all(|p| !shape.bbox_overlaps(p, 2.0)) {
            return Some(SynthShape {
                color: vivid_color(rng),
                added: rng.random_bool(0.5),
                ..shape
            });
        }
    }
    None
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let hw = size * size;
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.02..0.25);
            let fx = rng.random_range(0.02..0.25);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.03..0.07);
            (fy, fx, phase, amp)
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.3));
    let mut out = vec![0.0; 3 * hw];
    for r in 0..size {
        for c in 0..size {
            let t: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * r as f64 + fx * c as f64) + ph).sin())
                .sum();
            let grain = noise.sample(rng);
            for ch in 0..3 {
                out[ch * hw + r * size + c] = base[ch] + tint[ch] * t + grain;
            }
        }
    }
    out
}

fn paint(frame: &mut [f64], size: usize, shape: &SynthShape, rng: &mut ChaCha8Rng) {
    let hw = size * size;
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    for r in 0..size {
        for c in 0..size {
            if shape.contains(r, c) {
                let n = noise.sample(rng);
                for ch in 0..3 {
                    frame[ch * hw + r * size + c] = shape.color[ch] + n;
                }
            }
        }
    }
}

fn distract(frame: &mut [f64], rng: &mut ChaCha8Rng) {
    let contrast = 1.0 + rng.random_range(-CONTRAST..CONTRAST);
    let shift = rng.random_range(-BRIGHTNESS..BRIGHTNESS);
    let speckle = Normal::new(0.0, SPECKLE_STD).expect("valid std");
    for v in frame.iter_mut() {
        let x = (*v - 0.5) * contrast + 0.5 + shift + speckle.sample(rng);
        *v = (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Scene `index` of the stream defined by `seed`.
pub fn synth_scene(seed: u64, index: u64, size: usize, change_rate: f64) -> Result<SynthScene> {
    check_args(size, change_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let bg = background(&mut rng, size);

    let total = size as f64 * size as f64;
    let target = change_rate * total * rng.random_range(0.6..1.4);
    let k = rng.random_range(1..=MAX_CHANGES);
    let mut shapes: Vec<SynthShape> = Vec::new();
    for _ in 0..k {
        let area = target / k as f64 * rng.random_range(0.75..1.25);
        if let Some(s) = place(&mut rng, size, area, &shapes, true) {
            shapes.push(s);
        }
    }
    let persistent = rng.random_range(0..=2);
    for _ in 0..persistent {
        let area = total * rng.random_range(0.01..0.04);
        if let Some(s) = place(&mut rng, size, area, &shapes, false) {
            shapes.push(s);
        }
    }

    let mut t1 = bg.clone();
    let mut t2 = bg;
    for s in &shapes {
        match (s.changed, s.added) {
            (false, _) => {
                let mut tex = ChaCha8Rng::seed_from_u64(rng.random());
                let mut tex2 = tex.clone();
                paint(&mut t1, size, s, &mut tex);
                paint(&mut t2, size, s, &mut tex2);
            }
            (true, true) => paint(&mut t2, size, s, &mut rng),
            (true, false) => paint(&mut t1, size, s, &mut rng),
        }
    }
    distract(&mut t1, &mut rng);
    distract(&mut t2, &mut rng);

    let changed: Vec<&SynthShape> = shapes.iter().filter(|s| s.changed).collect();
    let mask = BinaryMask::from_fn(size, size, |r, c| changed.iter().any(|s| s.contains(r, c)));
    let tile = BiTemporalTile::new(
        format!("{index:05}.png"),
        Tensor::from_vec(&[3, size, size], t1)?,
        Tensor::from_vec(&[3, size, size], t2)?,
        Some(mask),
    )?;
    Ok(SynthScene { tile, shapes })
}

pub fn synth_generate(seed: u64, n: usize, size: usize, change_rate: f64) -> Result<Vec<BiTemporalTile>> {
    (0..n as u64)
        .map(|i| synth_scene(seed, i, size, change_rate).map(|s| s.tile))
        .collect()
}

/// Train/val/test sizes for a 70/15/15 split of `n` scenes.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = (n as f64 * 0.7).round() as usize;
    let val = ((n as f64 * 0.15).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Materializes `out/{train,val,test}/{A,B,label}`; returns the split sizes.
pub fn write_synth_dataset(out: &Path, seed: u64, n: usize, size: usize, change_rate: f64) -> Result<[usize; 3]> {
    let tiles = synth_generate(seed, n, size, change_rate)?;
    let sizes = split_sizes(n);
    let mut it = tiles.iter();
    for (split, &count) in Split::ALL.iter().zip(&sizes) {
        let dir = super::split_dir(out, *split);
        for d in ["A", "B", "label"] {
            let p = dir.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for tile in it.by_ref().take(count) {
            write_tile(&dir, &tile.name, tile)?;
        }
    }
    Ok(sizes)
}
