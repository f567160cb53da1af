//! Cutting large co-registered rasters into a grid of fixed-size tiles.

use image::{GenericImageView, GrayImage, RgbImage};

use super::{normalize_mask, rgb_to_tensor, BiTemporalTile};
use crate::backbone::MAX_STRIDE;
use crate::error::{Error, Result};

/// One grid cell, still as 8-bit rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    pub row: usize,
    pub col: usize,
    pub a: RgbImage,
    pub b: RgbImage,
    pub label: GrayImage,
}

impl RasterTile {
    /// File stem `row_col`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.row, self.col)
    }

    pub fn to_tile(&self) -> Result<BiTemporalTile> {
        BiTemporalTile::new(
            self.stem(),
            rgb_to_tensor(&self.a),
            rgb_to_tensor(&self.b),
            Some(normalize_mask(&self.label)),
        )
    }
}

/// Grid size `(rows, cols)` for a raster; edge remainders are dropped.
pub fn tile_count(height: usize, width: usize, size: usize, stride: usize) -> Result<(usize, usize)> {
    if size == 0 || size % MAX_STRIDE != 0 {
        return Err(Error::config(format!("tile size {size} must be a positive multiple of {MAX_STRIDE}")));
    }
    if stride == 0 {
        return Err(Error::config("tile stride must be at least 1"));
    }
    if height < size || width < size {
        return Err(Error::shape(format!(
            "raster {height}×{width} is smaller than the tile size {size}"
        )));
    }
    Ok(((height - size) / stride + 1, (width - size) / stride + 1))
}

/// Row-major grid of crops at `(i·stride, j·stride)`.
pub fn tile_rasters(
    a: &RgbImage,
    b: &RgbImage,
    label: &GrayImage,
    size: usize,
    stride: usize,
) -> Result<Vec<RasterTile>> {
    if a.dimensions() != b.dimensions() || a.dimensions() != label.dimensions() {
        return Err(Error::CoRegistration(format!(
            "raster sizes differ: A {:?}, B {:?}, label {:?}",
            a.dimensions(),
            b.dimensions(),
            label.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    let (rows, cols) = tile_count(h as usize, w as usize, size, stride)?;
    let s = size as u32;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (y, x) = ((i * stride) as u32, (j * stride) as u32);
            out.push(RasterTile {
                row: i,
                col: j,
                a: a.view(x, y, s, s).to_image(),
                b: b.view(x, y, s, s).to_image(),
                label: label.view(x, y, s, s).to_image(),
            });
        }
    }
    Ok(out)
}

pub fn tile_pair(
    big_a: &RgbImage,
    big_b: &RgbImage,
    big_label: &GrayImage,
    size: usize,
    stride: usize,
) -> Result<Vec<BiTemporalTile>> {
    tile_rasters(big_a, big_b, big_label, size, stride)?
        .iter()
        .map(RasterTile::to_tile)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn rasters(h: u32, w: u32) -> (RgbImage, RgbImage, GrayImage) {
        let a = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]));
        let b = RgbImage::from_fn(w, h, |x, y| Rgb([(y % 256) as u8, (x % 256) as u8, 7]));
        let l = GrayImage::from_fn(w, h, |x, y| Luma([if (x / 7 + y / 5) % 2 == 0 { 255 } else { 0 }]));
        (a, b, l)
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(tile_count(512, 512, 256, 256).unwrap(), (2, 2));
        assert_eq!(tile_count(512, 512, 256, 128).unwrap(), (3, 3));
        assert_eq!(tile_count(600, 300, 256, 256).unwrap(), (2, 1));
        assert!(tile_count(100, 512, 256, 256).is_err());
        assert!(tile_count(512, 512, 100, 256).is_err());
    }

    #[test]
    fn crops_match_source() {
        let (a, b, l) = rasters(96, 128);
        let tiles = tile_rasters(&a, &b, &l, 64, 32).unwrap();
        assert_eq!(tiles.len(), 2 * 3);
        for t in &tiles {
            let (y0, x0) = ((t.row * 32) as u32, (t.col * 32) as u32);
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(t.a.get_pixel(x, y), a.get_pixel(x0 + x, y0 + y));
                    assert_eq!(t.b.get_pixel(x, y), b.get_pixel(x0 + x, y0 + y));
                    assert_eq!(t.label.get_pixel(x, y), l.get_pixel(x0 + x, y0 + y));
                }
            }
        }
        assert_eq!(tiles[4].stem(), "1_1");
    }

    #[test]
    fn disjoint_grid_covers_interior() {
        let (a, b, l) = rasters(100, 70);
        let tiles = tile_rasters(&a, &b, &l, 32, 32).unwrap();
        let mut hits = vec![0u8; 100 * 70];
        for t in &tiles {
            for y in 0..32 {
                for x in 0..32 {
                    hits[(t.row * 32 + y) * 70 + t.col * 32 + x] += 1;
                }
            }
        }
        for y in 0..100 {
            for x in 0..70 {
                let inside = y < 96 && x < 64;
                assert_eq!(hits[y * 70 + x], inside as u8);
            }
        }
    }

    #[test]
    fn mismatched_rasters() {
        let (a, _, l) = rasters(64, 64);
        let (b, _, _) = rasters(64, 96);
        assert!(matches!(tile_rasters(&a, &b, &l, 32, 32), Err(Error::CoRegistration(_))));
    }

    #[test]
    fn tiles_become_model_inputs() {
        let (a, b, l) = rasters(64, 64);
        let tiles = tile_pair(&a, &b, &l, 32, 32).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[0].t1.shape(), &[3, 32, 32]);
        assert!(tiles[0].mask.as_ref().unwrap().count_changed() > 0);
    }
}
