//! Joint flip / right-angle rotation of both frames and the mask.

use rand::Rng;

use super::BiTemporalTile;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// One drawn transform: optional flips, then `rot90` quarter turns clockwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        hflip: false,
        vflip: false,
        rot90: 0,
    };

    /// Each of the three operations fires with probability 0.5; a firing
    /// rotation picks k uniformly from {0, 1, 2, 3}.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rot90 = if rng.random_bool(0.5) { rng.random_range(0..4u8) } else { 0 };
        Augmentation { hflip, vflip, rot90 }
    }

    /// Output dims for an input of `(h, w)`.
    pub fn out_dims(&self, (h, w): (usize, usize)) -> (usize, usize) {
        if self.rot90 % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinate feeding output pixel `(r, c)`.
    pub fn source(&self, (h, w): (usize, usize), (r, c): (usize, usize)) -> (usize, usize) {
        // Undo the rotation first (it was applied last), then the flips.
        let (mut r, mut c) = (r, c);
        let (mut hh, mut ww) = self.out_dims((h, w));
        for _ in 0..self.rot90 % 4 {
            // Clockwise turn: (r, c) in H×W goes to (c, H−1−r) in W×H, and H is
            // the current width.
            let (pr, pc) = (ww - 1 - c, r);
            r = pr;
            c = pc;
            std::mem::swap(&mut hh, &mut ww);
        }
        if self.vflip {
            r = h - 1 - r;
        }
        if self.hflip {
            c = w - 1 - c;
        }
        (r, c)
    }

    fn apply_planes(&self, data: &[f64], planes: usize, dims: (usize, usize)) -> Vec<f64> {
        let (h, w) = dims;
        let (oh, ow) = self.out_dims(dims);
        let mut out = vec![0.0; data.len()];
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(dims, (r, c));
                for p in 0..planes {
                    out[p * oh * ow + r * ow + c] = data[p * h * w + sr * w + sc];
                }
            }
        }
        out
    }

    pub fn apply_image(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = self.out_dims((h, w));
        Tensor::from_vec(&[c, oh, ow], self.apply_planes(t.data(), c, (h, w))).expect("sized buffer")
    }

    pub fn apply_mask(&self, m: &BinaryMask) -> BinaryMask {
        let dims = m.dims();
        let (oh, ow) = self.out_dims(dims);
        BinaryMask::from_fn(oh, ow, |r, c| {
            let (sr, sc) = self.source(dims, (r, c));
            m.get(sr, sc)
        })
    }

    pub fn apply(&self, tile: &BiTemporalTile) -> BiTemporalTile {
        BiTemporalTile {
            name: tile.name.clone(),
            t1: self.apply_image(&tile.t1),
            t2: self.apply_image(&tile.t2),
            mask: tile.mask.as_ref().map(|m| self.apply_mask(m)),
        }
    }
}

/// Draws an [`Augmentation`] from `rng` and applies it to the whole tile.
pub fn augment<R: Rng + ?Sized>(tile: &BiTemporalTile, rng: &mut R) -> BiTemporalTile {
    Augmentation::sample(rng).apply(tile)
}
