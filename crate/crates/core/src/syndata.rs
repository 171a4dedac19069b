//! Synthetic "tumor on tissue" patches with exact masks, and leakage-free
//! dataset splits built from them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, BinaryMask, Patch, PatchLabel};

/// Sampling attempts allowed before the foreground-fraction range is declared unreachable.
pub const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub blob_count: (usize, usize),
    pub fg_range: (f64, f64),
    /// Blur applied to the hard blob mask before blending, in pixels.
    pub boundary_blur: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            size: 64,
            noise: 0.03,
            blob_count: (1, 4),
            fg_range: (0.20, 0.90),
            boundary_blur: 1.5,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "patch size must be a multiple of 4 and at least 8, got {}",
                self.size
            )));
        }
        let (lo, hi) = self.fg_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "invalid foreground range [{lo}, {hi}]"
            )));
        }
        let (bmin, bmax) = self.blob_count;
        if bmin == 0 || bmin > bmax {
            return Err(Error::Config(format!(
                "invalid blob count range [{bmin}, {bmax}]"
            )));
        }
        if self.noise < 0.0 || self.boundary_blur < 0.0 {
            return Err(Error::Config("noise and blur must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub patch_id: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy)]
struct Palette {
    stroma: [f64; 3],
    stroma_nuclei: [f64; 3],
    tumor: [f64; 3],
    tumor_nuclei: [f64; 3],
}

/// Generates one patch and its exact mask. Deterministic in `(seed, label, params)`.
pub fn generate_patch(
    seed: u64,
    label: PatchLabel,
    params: &GeneratorParams,
) -> Result<(Patch, GroundTruthMask)> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64| {
        c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
    };
    let palette = Palette {
        stroma: jitter(&mut rng, [0.90, 0.74, 0.84], 0.03),
        stroma_nuclei: jitter(&mut rng, [0.62, 0.46, 0.70], 0.03),
        tumor: jitter(&mut rng, [0.66, 0.46, 0.74], 0.03),
        tumor_nuclei: jitter(&mut rng, [0.36, 0.20, 0.50], 0.03),
    };

    let shading = low_frequency_field(&mut rng, n, 0.05);
    let stroma_nuclei = nuclei_map(&mut rng, n, 0.004);
    let tumor_nuclei = nuclei_map(&mut rng, n, 0.03);

    let mask = match label {
        PatchLabel::Negative => BinaryMask::zeros(n, n),
        PatchLabel::Positive => sample_blobs(&mut rng, params)?,
    };
    let soft = gaussian_blur(&mask.to_f64(), params.boundary_blur);

    let noise = Normal::new(0.0, params.noise.max(1e-12)).expect("valid std");
    let mut pixels = Array3::zeros((n, n, 3));
    for i in 0..n {
        for j in 0..n {
            let s = soft[[i, j]];
            for c in 0..3 {
                let stroma = mix(palette.stroma[c], palette.stroma_nuclei[c], stroma_nuclei[[i, j]]);
                let tumor = mix(palette.tumor[c], palette.tumor_nuclei[c], tumor_nuclei[[i, j]]);
                let v = mix(stroma, tumor, s) * (1.0 + shading[[i, j]])
                    + if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // 8-bit quantization so the PNG round trip is exact.
                pixels[[i, j, c]] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }

    let id = format!("synth_{seed:016x}");
    let patch = Patch::new(id.clone(), "synthetic", pixels, label)?;
    Ok((patch, GroundTruthMask { patch_id: id, mask }))
}

fn mix(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

fn low_frequency_field(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 / n as f64, j as f64 / n as f64);
        waves
            .iter()
            .map(|(fy, fx, ph)| (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
            .sum::<f64>()
            * amplitude
            / 3.0
    })
}

/// Small dark spots scattered at the given per-pixel density.
fn nuclei_map(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Array2<f64> {
    let count = (density * (n * n) as f64).round() as usize;
    let mut map = Array2::<f64>::zeros((n, n));
    for _ in 0..count {
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let r: f64 = rng.gen_range(0.8..1.8);
        let reach = r.ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let y = cy.floor() as isize + dy;
                let x = cx.floor() as isize + dx;
                if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                    continue;
                }
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                let v = (1.0 - (d - r + 0.5).max(0.0)).clamp(0.0, 1.0);
                let cell = &mut map[[y as usize, x as usize]];
                *cell = cell.max(v);
            }
        }
    }
    map
}

fn sample_blobs(rng: &mut ChaCha8Rng, params: &GeneratorParams) -> Result<BinaryMask> {
    let n = params.size;
    let (lo, hi) = params.fg_range;
    let area = (n * n) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.gen_range(params.blob_count.0..=params.blob_count.1);
        let target = rng.gen_range(lo..=hi);
        let shares: Vec<f64> = (0..count).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = shares.iter().sum();
        let blobs: Vec<Blob> = shares
            .iter()
            .map(|s| {
                let radius = (target * area * s / total / std::f64::consts::PI).sqrt() * 1.1;
                Blob {
                    cy: rng.gen_range(0.2..0.8) * n as f64,
                    cx: rng.gen_range(0.2..0.8) * n as f64,
                    radius,
                    wobble: [
                        (rng.gen_range(0.0..0.15), rng.gen_range(0.0..std::f64::consts::TAU)),
                        (rng.gen_range(0.0..0.10), rng.gen_range(0.0..std::f64::consts::TAU)),
                    ],
                }
            })
            .collect();
        let mask = BinaryMask::from_fn(n, n, |i, j| {
            blobs
                .iter()
                .any(|b| b.contains(i as f64 + 0.5, j as f64 + 0.5))
        });
        let f = mask.fraction();
        if f >= lo && f <= hi {
            return Ok(mask);
        }
    }
    Err(Error::Generation(format!(
        "no blob layout within {MAX_ATTEMPTS} attempts reached foreground fraction range [{lo}, {hi}]"
    )))
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    wobble: [(f64, f64); 2],
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        let r = self.radius
            * (1.0
                + self.wobble[0].0 * (2.0 * theta + self.wobble[0].1).sin()
                + self.wobble[1].0 * (3.0 * theta + self.wobble[1].1).sin());
        dy.hypot(dx) < r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub slides: usize,
    pub generator: GeneratorParams,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            train: 64,
            valid: 16,
            test: 16,
            slides: 12,
            generator: GeneratorParams::default(),
        }
    }
}

impl DatasetParams {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub patch: String,
    pub mask: String,
    pub label: PatchLabel,
    pub slide_id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_seed: u64,
    pub generator: GeneratorParams,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// SplitMix64 finalizer, used to derive independent per-patch seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns slides to splits and labels to patches without touching the disk.
pub fn plan_dataset(params: &DatasetParams, seed: u64) -> Result<DatasetManifest> {
    params.generator.validate()?;
    let active: Vec<Split> = Split::ALL
        .into_iter()
        .filter(|s| params.count(*s) > 0)
        .collect();
    if active.is_empty() {
        return Err(Error::Config("dataset has no patches".into()));
    }
    for &split in &active {
        if !params.count(split).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{} split has {} patches; an even count is needed to balance positives and negatives",
                split.name(),
                params.count(split)
            )));
        }
    }
    if params.slides < active.len() {
        return Err(Error::Config(format!(
            "{} slides cannot cover {} disjoint splits",
            params.slides,
            active.len()
        )));
    }
    let total_patches: usize = active.iter().map(|s| params.count(*s)).sum();
    if params.slides > total_patches {
        return Err(Error::Config(format!(
            "{} slides exceed the {} requested patches",
            params.slides, total_patches
        )));
    }

    // Largest-remainder allocation of slides, at least one per split.
    let spare = params.slides - active.len();
    let mut alloc: Vec<(usize, f64)> = active
        .iter()
        .map(|s| {
            let exact = spare as f64 * params.count(*s) as f64 / total_patches as f64;
            (1 + exact.floor() as usize, exact.fract())
        })
        .collect();
    let mut leftover = params.slides - alloc.iter().map(|a| a.0).sum::<usize>();
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.sort_by(|&a, &b| alloc[b].1.total_cmp(&alloc[a].1).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if alloc[k].0 < params.count(active[k]) {
            alloc[k].0 += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slide_ids: Vec<String> = (0..params.slides).map(|i| format!("slide_{i:03}")).collect();
    slide_ids.shuffle(&mut rng);

    let mut entries = Vec::with_capacity(total_patches);
    let mut next_slide = 0;
    let mut global = 0u64;
    for (k, &split) in active.iter().enumerate() {
        let count = params.count(split);
        let slides = &slide_ids[next_slide..next_slide + alloc[k].0];
        next_slide += alloc[k].0;
        let mut labels: Vec<PatchLabel> = (0..count)
            .map(|i| {
                if i < count / 2 {
                    PatchLabel::Positive
                } else {
                    PatchLabel::Negative
                }
            })
            .collect();
        labels.shuffle(&mut rng);
        for (i, label) in labels.into_iter().enumerate() {
            let id = format!("{}_{i:04}", split.name());
            entries.push(ManifestEntry {
                patch: format!("patches/{id}.png"),
                mask: format!("masks/{id}_mask.png"),
                id,
                label,
                slide_id: slides[i * slides.len() / count].clone(),
                split,
                seed: mix_seed(seed, global),
            });
            global += 1;
        }
    }
    Ok(DatasetManifest {
        generator_seed: seed,
        generator: params.generator.clone(),
        entries,
    })
}

/// Generates every patch and mask under `out_dir` and writes `manifest.json`.
pub fn build_dataset(params: &DatasetParams, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = plan_dataset(params, seed)?;
    for sub in ["patches", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    manifest.entries.par_iter().try_for_each(|entry| {
        let (patch, gt) = generate_entry(entry, &manifest.generator)?;
        patch.save_png(&out_dir.join(&entry.patch))?;
        gt.mask.save_png(&out_dir.join(&entry.mask))
    })?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn generate_entry(entry: &ManifestEntry, generator: &GeneratorParams) -> Result<(Patch, GroundTruthMask)> {
    let (mut patch, mut gt) = generate_patch(entry.seed, entry.label, generator)?;
    patch.id = entry.id.clone();
    patch.slide_id = entry.slide_id.clone();
    gt.patch_id = entry.id.clone();
    Ok((patch, gt))
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<(Patch, GroundTruthMask)> {
        let patch = Patch::load_png(
            &self.root.join(&entry.patch),
            entry.id.clone(),
            entry.slide_id.clone(),
            entry.label,
        )?;
        let mask = BinaryMask::load_png(&self.root.join(&entry.mask))?;
        Ok((
            patch,
            GroundTruthMask {
                patch_id: entry.id.clone(),
                mask,
            },
        ))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(Patch, GroundTruthMask)>> {
        let entries: Vec<&ManifestEntry> = self.manifest.split(split).collect();
        entries.par_iter().map(|e| self.load_entry(e)).collect()
    }
}
