//! Square multi-channel intensity grids.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A square image stored channel-major (`[c][row][col]`), intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || side == 0 {
            return Err(Error::shape("image must have at least one channel and pixel"));
        }
        if data.len() != channels * side * side {
            return Err(Error::shape(alloc::format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                side,
                side
            )));
        }
        Ok(Image {
            channels,
            side,
            data,
        })
    }

    pub fn filled(channels: usize, side: usize, value: f64) -> Self {
        Image {
            channels,
            side,
            data: vec![value; channels * side * side],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.side + row) * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.side + row) * self.side + col] = v;
    }

    /// Copies the `size x size` window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<Image> {
        if size == 0 || row + size > self.side || col + size > self.side {
            return Err(Error::shape(alloc::format!(
                "window {size} at ({row},{col}) exceeds image side {}",
                self.side
            )));
        }
        let mut data = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            for r in row..row + size {
                let start = (c * self.side + r) * self.side + col;
                data.extend_from_slice(&self.data[start..start + size]);
            }
        }
        Ok(Image {
            channels: self.channels,
            side: size,
            data,
        })
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    ///
    /// Every output value is a convex combination of input values, so the
    /// `[0, 1]` range is preserved; resizing to the same side is the identity.
    pub fn resize(&self, target: usize) -> Result<Image> {
        if target == 0 {
            return Err(Error::config("target_side", "must be at least 1"));
        }
        if target == self.side {
            return Ok(self.clone());
        }
        let n = self.side;
        let scale = n as f64 / target as f64;
        let taps: Vec<(usize, usize, f64)> = (0..target)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = libm::floor(x) as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, x - lo as f64)
            })
            .collect();
        let mut out = Vec::with_capacity(self.channels * target * target);
        for c in 0..self.channels {
            for &(r0, r1, fr) in &taps {
                for &(c0, c1, fc) in &taps {
                    let top = self.get(c, r0, c0) * (1.0 - fc) + self.get(c, r0, c1) * fc;
                    let bottom = self.get(c, r1, c0) * (1.0 - fc) + self.get(c, r1, c1) * fc;
                    out.push(top * (1.0 - fr) + bottom * fr);
                }
            }
        }
        Ok(Image {
            channels: self.channels,
            side: target,
            data: out,
        })
    }
}
