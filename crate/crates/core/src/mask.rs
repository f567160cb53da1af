use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary H×W raster; 1 marks a changed pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from 0/1 values; any nonzero byte is stored as 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.data[r * self.width + c] = value as u8;
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn density(&self) -> f64 {
        self.count_changed() as f64 / self.data.len().max(1) as f64
    }

    pub fn expect_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::shape(format!(
                "mask is {}×{} but expected {}×{}",
                self.height, self.width, other.0, other.1
            )));
        }
        Ok(())
    }

    /// Stacks masks into an N×H×W tensor of 0.0/1.0 values.
    pub fn stack(masks: &[&BinaryMask]) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero masks"))?;
        let mut data = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            m.expect_dims(first.dims())?;
            data.extend(m.data.iter().map(|&v| v as f64));
        }
        Tensor::from_vec(&[masks.len(), first.height, first.width], data)
    }
}
