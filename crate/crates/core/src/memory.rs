//! Spatial feature memories. Features of every visited glimpse are written
//! into three scene-aligned grids at strides 1, 2 and 4; overlapping writes
//! are resolved newest-wins. Unwritten cells stay exactly zero.

use crate::error::{AsegError, Result};
use crate::retina::GlimpseSpec;
use ndarray::{s, Array2, Array3};

/// Depth of the coarsest (stride 4) memory.
pub const BOTTLENECK_CHANNELS: usize = 32;

/// Per-glimpse encoder features at the three strides (`g`, `g/2`, `g/4`).
#[derive(Debug, Clone)]
pub struct GlimpseFeatures {
    pub f1: Array3<f64>,
    pub f2: Array3<f64>,
    pub fb: Array3<f64>,
}

impl GlimpseFeatures {
    /// Checks the stride arithmetic between the three levels.
    pub fn validate(&self) -> Result<()> {
        let (g, gw, _) = self.f1.dim();
        let (h2, w2, _) = self.f2.dim();
        let (hb, wb, cb) = self.fb.dim();
        if g != gw || (h2, w2) != (g / 2, g / 2) || (hb, wb) != (g / 4, g / 4) {
            return Err(AsegError::ShapeMismatch(format!(
                "glimpse features {}x{} / {}x{} / {}x{} break the /1,/2,/4 ladder",
                g, gw, h2, w2, hb, wb
            )));
        }
        if cb != BOTTLENECK_CHANNELS {
            return Err(AsegError::ShapeMismatch(format!(
                "bottleneck features must have {BOTTLENECK_CHANNELS} channels, got {cb}"
            )));
        }
        Ok(())
    }
}

/// The three partially-filled grids plus occupancy masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub level1: Array3<f64>,
    pub level2: Array3<f64>,
    pub bottleneck: Array3<f64>,
    pub mask1: Array2<bool>,
    pub mask2: Array2<bool>,
    pub mask_b: Array2<bool>,
}

impl MemoryState {
    /// Fresh zeroed memory for an `h x w` scene. `h` and `w` must be
    /// divisible by 16 so the stride ladder and the 16x16 attention patch
    /// grid both align.
    pub fn new(h: usize, w: usize, c1: usize, c2: usize) -> Result<Self> {
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(AsegError::InvalidMemorySize { height: h, width: w });
        }
        Ok(Self {
            level1: Array3::zeros((h, w, c1)),
            level2: Array3::zeros((h / 2, w / 2, c2)),
            bottleneck: Array3::zeros((h / 4, w / 4, BOTTLENECK_CHANNELS)),
            mask1: Array2::from_elem((h, w), false),
            mask2: Array2::from_elem((h / 2, w / 2), false),
            mask_b: Array2::from_elem((h / 4, w / 4), false),
        })
    }

    pub fn scene_size(&self) -> (usize, usize) {
        let (h, w, _) = self.level1.dim();
        (h, w)
    }

    /// Writes glimpse features at stride-scaled positions, overwriting any
    /// overlap with the newest values.
    pub fn write(&mut self, feats: &GlimpseFeatures, spec: GlimpseSpec) -> Result<()> {
        feats.validate()?;
        if spec.top % 4 != 0 || spec.left % 4 != 0 {
            return Err(AsegError::MisalignedGlimpse {
                top: spec.top,
                left: spec.left,
            });
        }
        let (h, w) = self.scene_size();
        let g = feats.f1.dim().0;
        if spec.top + g > h || spec.left + g > w {
            return Err(AsegError::GlimpseOutOfBounds {
                top: spec.top,
                left: spec.left,
                size: g,
                height: h,
                width: w,
            });
        }
        for (grid, mask, feat, stride) in [
            (&mut self.level1, &mut self.mask1, &feats.f1, 1usize),
            (&mut self.level2, &mut self.mask2, &feats.f2, 2),
            (&mut self.bottleneck, &mut self.mask_b, &feats.fb, 4),
        ] {
            let (t, l, side) = (spec.top / stride, spec.left / stride, g / stride);
            grid.slice_mut(s![t..t + side, l..l + side, ..]).assign(feat);
            mask.slice_mut(s![t..t + side, l..l + side]).fill(true);
        }
        Ok(())
    }

    /// Occupied fraction of each level, in write order (level1, level2,
    /// bottleneck).
    pub fn occupancy_fraction(&self) -> [f64; 3] {
        let frac = |m: &Array2<bool>| m.iter().filter(|v| **v).count() as f64 / m.len() as f64;
        [frac(&self.mask1), frac(&self.mask2), frac(&self.mask_b)]
    }

    /// Zeroes all grids and masks.
    pub fn reset(&mut self) {
        self.level1.fill(0.0);
        self.level2.fill(0.0);
        self.bottleneck.fill(0.0);
        self.mask1.fill(false);
        self.mask2.fill(false);
        self.mask_b.fill(false);
    }
}
