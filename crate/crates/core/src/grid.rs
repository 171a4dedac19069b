//! Dense 2-D grids shared by every stage: patches, binary masks, float maps,
//! plus the small image operations (rotation, blur, resampling, PNG I/O)
//! used around them.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Positive,
    Negative,
}

impl PatchLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, PatchLabel::Positive)
    }

    pub fn as_target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

/// An RGB patch with values in `[0, 1]`, stored `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: String,
    pub slide_id: String,
    pub pixels: Array3<f64>,
    pub label: PatchLabel,
}

impl Patch {
    pub fn new(
        id: impl Into<String>,
        slide_id: impl Into<String>,
        pixels: Array3<f64>,
        label: PatchLabel,
    ) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w || h % 4 != 0 || h == 0 {
            return Err(Error::Shape(format!(
                "patch must be square with a side divisible by 4, got {h}x{w}"
            )));
        }
        if c != 3 {
            return Err(Error::Shape(format!("patch must have 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("patch pixel outside [0, 1]".into()));
        }
        Ok(Self {
            id: id.into(),
            slide_id: slide_id.into(),
            pixels,
            label,
        })
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    /// Channel-first copy for the convolutional networks.
    pub fn to_chw(&self) -> Array3<f64> {
        self.pixels.view().permuted_axes([2, 0, 1]).to_owned()
    }

    /// The same patch rotated counter-clockwise by `quarter_turns × 90°`.
    pub fn rotated(&self, quarter_turns: usize) -> Patch {
        Patch {
            id: self.id.clone(),
            slide_id: self.slide_id.clone(),
            pixels: rot90_hwc(&self.pixels, quarter_turns),
            label: self.label,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            Rgb([
                to_u8(self.pixels[[y, x, 0]]),
                to_u8(self.pixels[[y, x, 1]]),
                to_u8(self.pixels[[y, x, 2]]),
            ])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(
        path: &Path,
        id: impl Into<String>,
        slide_id: impl Into<String>,
        label: PatchLabel,
    ) -> Result<Self> {
        let img = open_image(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        Patch::new(id, slide_id, pixels, label)
    }
}

/// A dense `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask(Array2<u8>);

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Array2::from_shape_fn((h, w), |(i, j)| u8::from(f(i, j))))
    }

    /// Builds a mask from any numeric grid, treating every nonzero cell as foreground.
    pub fn from_nonzero<T: Copy + PartialEq + Default>(values: ArrayView2<'_, T>) -> Self {
        Self(values.mapv(|v| u8::from(v != T::default())))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.0[[i, j]] = u8::from(on);
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.0.view()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.0.len() as f64
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count()
    }

    /// True when every foreground pixel of `self` is also foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }

    pub fn transposed(&self) -> Self {
        Self(self.0.t().to_owned())
    }

    pub fn rotated(&self, quarter_turns: usize) -> Self {
        Self(rot90(&self.0, quarter_turns))
    }

    /// Writes the mask as an 8-bit `{0, 255}` grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dim();
        let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([if self.0[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |i, j| {
            img.get_pixel(j as u32, i as u32)[0] >= 128
        }))
    }
}

impl From<Array2<u8>> for BinaryMask {
    fn from(values: Array2<u8>) -> Self {
        Self(values.mapv(|v| u8::from(v != 0)))
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a `[0, 1]` map as a 16-bit grayscale PNG scaled by 65535.
pub fn save_map_png16(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_map_png16(path: &Path) -> Result<Array2<f64>> {
    let img = open_image(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        f64::from(img.get_pixel(j as u32, i as u32)[0]) / 65535.0
    }))
}

/// Counter-clockwise rotation by `quarter_turns × 90°` of a square-or-not grid.
pub fn rot90<T: Clone>(a: &Array2<T>, quarter_turns: usize) -> Array2<T> {
    let (h, w) = a.dim();
    match quarter_turns % 4 {
        0 => a.clone(),
        1 => Array2::from_shape_fn((w, h), |(i, j)| a[[j, w - 1 - i]].clone()),
        2 => Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]].clone()),
        _ => Array2::from_shape_fn((w, h), |(i, j)| a[[h - 1 - j, i]].clone()),
    }
}

/// [`rot90`] applied to every channel of an `H × W × C` image.
pub fn rot90_hwc(a: &Array3<f64>, quarter_turns: usize) -> Array3<f64> {
    let (h, w, c) = a.dim();
    let (oh, ow) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Array3::zeros((oh, ow, c));
    for ch in 0..c {
        let plane = a.index_axis(Axis(2), ch).to_owned();
        out.index_axis_mut(Axis(2), ch)
            .assign(&rot90(&plane, quarter_turns));
    }
    out
}

/// Min–max normalization to `[0, 1]`. Maps whose range is numerically flat
/// become all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() || hi - lo <= FLAT_RANGE {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Ranges at or below this are treated as constant by [`min_max_normalize`].
pub const FLAT_RANGE: f64 = 1e-9;

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = coord(i, sy, h);
        let (x0, x1, fx) = coord(j, sx, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = map.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * map[[i, clamp(j as isize + k as isize - radius, w)]])
            .sum::<f64>()
            / norm
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * horiz[[clamp(i as isize + k as isize - radius, h), j]])
            .sum::<f64>()
            / norm
    })
}
