//! Retina-like glimpses: mixed-resolution windows whose outer rings are
//! downscaled, plus the exact pixel-budget arithmetic for each setting.
//!
//! A glimpse is a `glimpse_size` square. Concentric square rings are sampled
//! at increasing downscale factors; the innermost ring is kept at full
//! resolution. The budget charge of a glimpse is the number of samples the
//! sensor takes, which is independent of where the glimpse lands.

use crate::error::{AsegError, Result};
use ndarray::{s, Array3};

/// Geometry of one retina setting: ring side lengths (innermost first) and
/// the integer downscale factor applied to each ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetinaConfig {
    pub num_scales: usize,
    pub glimpse_size: usize,
    pub ring_sizes: Vec<usize>,
    pub ring_scales: Vec<usize>,
}

impl RetinaConfig {
    /// Standard ring layout for 1, 2 or 3 scales: ring boundaries at thirds
    /// of the glimpse, downscale factors 1, 2, 3.
    pub fn from_scales(num_scales: usize, glimpse_size: usize) -> Result<Self> {
        let (ring_sizes, ring_scales) = match num_scales {
            1 => (vec![glimpse_size], vec![1]),
            2 => (vec![glimpse_size / 3, glimpse_size], vec![1, 2]),
            3 => (
                vec![glimpse_size / 3, 2 * glimpse_size / 3, glimpse_size],
                vec![1, 2, 3],
            ),
            n => {
                return Err(AsegError::InvalidRetinaConfig(format!(
                    "num_scales must be 1, 2 or 3, got {n}"
                )))
            }
        };
        Self::new(glimpse_size, ring_sizes, ring_scales)
    }

    pub fn new(glimpse_size: usize, ring_sizes: Vec<usize>, ring_scales: Vec<usize>) -> Result<Self> {
        let num_scales = ring_sizes.len();
        if num_scales == 0 || num_scales != ring_scales.len() {
            return Err(AsegError::InvalidRetinaConfig(format!(
                "ring_sizes ({}) and ring_scales ({}) must be equal-length and non-empty",
                ring_sizes.len(),
                ring_scales.len()
            )));
        }
        if glimpse_size == 0 || glimpse_size % 4 != 0 {
            return Err(AsegError::InvalidRetinaConfig(format!(
                "glimpse_size must be a positive multiple of 4, got {glimpse_size}"
            )));
        }
        if *ring_sizes.last().unwrap() != glimpse_size {
            return Err(AsegError::InvalidRetinaConfig(
                "last ring size must equal glimpse_size".into(),
            ));
        }
        if ring_scales[0] != 1 {
            return Err(AsegError::InvalidRetinaConfig(
                "innermost ring must be full resolution (scale 1)".into(),
            ));
        }
        for i in 0..num_scales {
            if i > 0 && ring_sizes[i] <= ring_sizes[i - 1] {
                return Err(AsegError::InvalidRetinaConfig(
                    "ring_sizes must be strictly increasing".into(),
                ));
            }
            let (r, sc) = (ring_sizes[i], ring_scales[i]);
            if sc == 0 || r % sc != 0 {
                return Err(AsegError::InvalidRetinaConfig(format!(
                    "ring size {r} not divisible by its scale {sc}"
                )));
            }
            if (glimpse_size - r) % 2 != 0 {
                return Err(AsegError::InvalidRetinaConfig(format!(
                    "ring size {r} cannot be centered in a {glimpse_size} glimpse"
                )));
            }
        }
        Ok(Self {
            num_scales,
            glimpse_size,
            ring_sizes,
            ring_scales,
        })
    }
}

/// A placed glimpse. `top` and `left` are 4-aligned so that feature writes
/// land on integer coordinates at strides 1, 2 and 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GlimpseSpec {
    pub top: usize,
    pub left: usize,
}

impl GlimpseSpec {
    pub fn new(
        top: usize,
        left: usize,
        config: &RetinaConfig,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        let g = config.glimpse_size;
        if top + g > image_h || left + g > image_w {
            return Err(AsegError::GlimpseOutOfBounds {
                top,
                left,
                size: g,
                height: image_h,
                width: image_w,
            });
        }
        if top % 4 != 0 || left % 4 != 0 {
            return Err(AsegError::MisalignedGlimpse { top, left });
        }
        Ok(Self { top, left })
    }
}

/// The reassembled mixed-resolution patch together with its analytic budget
/// charge.
#[derive(Debug, Clone)]
pub struct RetinaGlimpse {
    /// `glimpse_size x glimpse_size x channels`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    /// Number of sensor samples this setting consumes, per glimpse.
    pub source_pixel_count: usize,
}

/// Samples taken by one glimpse: for each ring, the ring area divided by the
/// squared downscale factor, rounded down. Location-independent.
pub fn analytic_pixel_count(config: &RetinaConfig) -> usize {
    let mut total = 0usize;
    let mut inner = 0usize;
    for i in 0..config.num_scales {
        let r = config.ring_sizes[i];
        let area = r * r - inner * inner;
        let sc = config.ring_scales[i];
        total += area / (sc * sc);
        inner = r;
    }
    total
}

/// Percentage of the image read by `n_glimpses` glimpses of this setting.
pub fn budget_ratio(config: &RetinaConfig, n_glimpses: usize, image_h: usize, image_w: usize) -> f64 {
    100.0 * (n_glimpses * analytic_pixel_count(config)) as f64 / (image_h * image_w) as f64
}

/// Centers a glimpse on `(row, col)`, rounds the corner down to a multiple
/// of 4 and clamps it into the image.
pub fn snap_location(
    row: usize,
    col: usize,
    image_h: usize,
    image_w: usize,
    glimpse_size: usize,
) -> (usize, usize) {
    let snap = |center: usize, limit: usize| -> usize {
        let raw = center as isize - (glimpse_size / 2) as isize;
        let mut v = raw.div_euclid(4) * 4;
        let max = (limit - glimpse_size) as isize;
        if v > max {
            v = max - max.rem_euclid(4);
        }
        v.max(0) as usize
    };
    (snap(row, image_h), snap(col, image_w))
}

/// Cuts the glimpse window at `spec` out of `image` and rebuilds it as a
/// single mixed-resolution patch: each ring is average-pooled by its scale
/// factor and re-inflated (nearest neighbor), finer rings painted over
/// coarser ones.
pub fn extract_glimpse(
    image: &Array3<f64>,
    spec: GlimpseSpec,
    config: &RetinaConfig,
) -> Result<RetinaGlimpse> {
    let (h, w, c) = image.dim();
    let g = config.glimpse_size;
    if spec.top + g > h || spec.left + g > w {
        return Err(AsegError::GlimpseOutOfBounds {
            top: spec.top,
            left: spec.left,
            size: g,
            height: h,
            width: w,
        });
    }
    let mut canvas = Array3::<f64>::zeros((g, g, c));
    for i in (0..config.num_scales).rev() {
        let r = config.ring_sizes[i];
        let sc = config.ring_scales[i];
        let off = (g - r) / 2;
        let crop = image.slice(s![
            spec.top + off..spec.top + off + r,
            spec.left + off..spec.left + off + r,
            ..
        ]);
        if sc == 1 {
            canvas.slice_mut(s![off..off + r, off..off + r, ..]).assign(&crop);
        } else {
            let cells = r / sc;
            let norm = 1.0 / (sc * sc) as f64;
            for cy in 0..cells {
                for cx in 0..cells {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..sc {
                            for dx in 0..sc {
                                acc += crop[[cy * sc + dy, cx * sc + dx, ch]];
                            }
                        }
                        let mean = acc * norm;
                        for dy in 0..sc {
                            for dx in 0..sc {
                                canvas[[off + cy * sc + dy, off + cx * sc + dx, ch]] = mean;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(RetinaGlimpse {
        pixels: canvas,
        source_pixel_count: analytic_pixel_count(config),
    })
}
