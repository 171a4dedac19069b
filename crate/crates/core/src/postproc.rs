//! CAM → binary initial mask: rotate-and-fuse, quantile thresholding and
//! morphological opening.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cam::EnhancedCam;
use crate::error::{Error, Result};
use crate::grid::{min_max_normalize, rot90, BinaryMask, Patch};

pub const ROTATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocConfig {
    /// Fraction of the positive activations (lowest first) set to background.
    pub quantile_q: f64,
    pub se_radius: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            quantile_q: 0.3,
            se_radius: 2,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.quantile_q) {
            return Err(Error::Config(format!(
                "quantile q must lie in [0, 1), got {}",
                self.quantile_q
            )));
        }
        if self.se_radius == 0 {
            return Err(Error::Config("structuring element radius must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialMask {
    pub patch_id: String,
    pub mask: BinaryMask,
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Keeps pixels strictly above the `q`-quantile of the positive activations.
pub fn quantile_threshold(cam: &Array2<f64>, q: f64) -> BinaryMask {
    let mut positives: Vec<f64> = cam.iter().copied().filter(|&v| v > 0.0).collect();
    let (h, w) = cam.dim();
    if positives.is_empty() {
        return BinaryMask::zeros(h, w);
    }
    positives.sort_by(f64::total_cmp);
    let cut = if q <= 0.0 { 0.0 } else { quantile_sorted(&positives, q) };
    BinaryMask::from_fn(h, w, |i, j| cam[[i, j]] > cut)
}

/// Average of the inverse-rotated CAMs of the four quarter-turn rotations
/// of `patch`, re-normalized to `[0, 1]`.
pub fn rotate_fuse<F>(mut cam_producer: F, patch: &Patch) -> Result<EnhancedCam>
where
    F: FnMut(&Patch) -> Result<EnhancedCam>,
{
    let (h, w, _) = patch.pixels.dim();
    if h != w {
        return Err(Error::Shape(format!("rotate-fuse needs a square patch, got {h}x{w}")));
    }
    let mut sum = Array2::<f64>::zeros((h, w));
    for k in 0..ROTATIONS {
        let cam = cam_producer(&patch.rotated(k))?;
        if cam.values.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "CAM producer returned {:?} for a {h}x{w} patch",
                cam.values.dim()
            )));
        }
        sum += &rot90(&cam.values, ROTATIONS - k);
    }
    sum /= ROTATIONS as f64;
    Ok(EnhancedCam {
        patch_id: patch.id.clone(),
        values: min_max_normalize(&sum),
    })
}

/// Disk structuring element: offsets with `dy² + dx² ≤ (r + ½)²`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let limit = (radius as f64 + 0.5).powi(2);
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= limit {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Pixels outside the image count as background.
pub fn erode(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = mask.dim();
    BinaryMask::from_fn(h, w, |i, j| {
        se.iter().all(|&(dy, dx)| {
            let (y, x) = (i as isize + dy, j as isize + dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
        })
    })
}

pub fn dilate(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (h, w) = mask.dim();
    BinaryMask::from_fn(h, w, |i, j| {
        se.iter().any(|&(dy, dx)| {
            let (y, x) = (i as isize - dy, j as isize - dx);
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
        })
    })
}

pub fn morph_open(mask: &BinaryMask, se_radius: usize) -> BinaryMask {
    let se = disk(se_radius);
    dilate(&erode(mask, &se), &se)
}

/// `morph_open(quantile_threshold(rotate_fuse(..)))`.
pub fn make_initial_mask<F>(cam_producer: F, patch: &Patch, cfg: &PostprocConfig) -> Result<InitialMask>
where
    F: FnMut(&Patch) -> Result<EnhancedCam>,
{
    cfg.validate()?;
    let fused = rotate_fuse(cam_producer, patch)?;
    Ok(initial_mask_from_fused(&fused, cfg))
}

/// The threshold and opening steps applied to an already fused CAM.
pub fn initial_mask_from_fused(fused: &EnhancedCam, cfg: &PostprocConfig) -> InitialMask {
    let thresholded = quantile_threshold(&fused.values, cfg.quantile_q);
    InitialMask {
        patch_id: fused.patch_id.clone(),
        mask: morph_open(&thresholded, cfg.se_radius),
    }
}

/// Plain 0.5 threshold of a single-orientation CAM, the no-post-processing baseline.
pub fn raw_threshold(cam: &Array2<f64>) -> BinaryMask {
    let (h, w) = cam.dim();
    BinaryMask::from_fn(h, w, |i, j| cam[[i, j]] > 0.5)
}
