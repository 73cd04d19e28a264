//! Dense multi-scale patch sampling.

use alloc::vec::Vec;

use crate::datamodel::{PatchId, PatchInstance, PersonSample};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridConfig {
    /// The person box is resized to a square of this side before sampling.
    pub resize_side: usize,
    /// Patch side lengths, in resized-box pixels.
    pub scales: Vec<usize>,
    pub stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            resize_side: 64,
            scales: alloc::vec![16, 24, 32],
            stride: 8,
        }
    }
}

/// Top-left corner and side of one sampling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub scale: usize,
}

impl Window {
    pub fn center(&self) -> (f64, f64) {
        let h = self.scale as f64 / 2.0;
        (self.row as f64 + h, self.col as f64 + h)
    }
}

impl GridConfig {
    /// Full-resolution sampling grid: 224-pixel box, 128/160/192 patches, stride 16.
    pub fn full_scale() -> Self {
        GridConfig {
            resize_side: 224,
            scales: alloc::vec![128, 160, 192],
            stride: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_side == 0 {
            return Err(Error::config("grid.resize_side", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("grid.stride", "must be at least 1"));
        }
        if self.scales.is_empty() {
            return Err(Error::config("grid.scales", "at least one scale is required"));
        }
        if self.scales.iter().any(|&s| s == 0 || s > self.resize_side) {
            return Err(Error::config("grid.scales", "every scale must lie in [1, resize_side]"));
        }
        Ok(())
    }

    /// Positions per axis for one scale.
    pub fn positions_per_axis(&self, scale: usize) -> usize {
        (self.resize_side - scale) / self.stride + 1
    }

    /// All windows in scale-major, row-major order.
    pub fn windows(&self) -> Result<Vec<Window>> {
        self.validate()?;
        let mut out = Vec::new();
        for &scale in &self.scales {
            let n = self.positions_per_axis(scale);
            for i in 0..n {
                for j in 0..n {
                    out.push(Window {
                        row: i * self.stride,
                        col: j * self.stride,
                        scale,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Resizes the sample's box to `resize_side` and crops every grid window.
pub fn extract_patches(sample: &PersonSample, cfg: &GridConfig) -> Result<Vec<PatchInstance>> {
    let windows = cfg.windows()?;
    let resized = sample.image.resize(cfg.resize_side)?;
    windows
        .iter()
        .enumerate()
        .map(|(local, w)| {
            Ok(PatchInstance {
                id: PatchId::new(sample.id, local as u32),
                sample_id: sample.id,
                row: w.row,
                col: w.col,
                scale: w.scale,
                pixels: resized.crop(w.row, w.col, w.scale)?,
            })
        })
        .collect()
}

/// Bilinear resize of a patch to the network input side.
pub fn resize_patch(patch: &PatchInstance, target_side: usize) -> Result<Image> {
    patch.pixels.resize(target_side)
}
