//! Point prompts sampled from a normalized activation map.
//!
//! The "entropy" of a pixel is its activation divided by the total
//! activation, so the map is a probability distribution over pixels. No
//! Shannon entropy is computed.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POINTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Array2<f64>,
    /// Set when the source map had no positive activation.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointPromptSet {
    pub patch_id: String,
    pub points: Vec<PointPrompt>,
    pub polarity: Polarity,
}

impl PointPromptSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

pub fn entropy_map(activation: &Array2<f64>) -> Result<EntropyMap> {
    if let Some(v) = activation.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::Domain(format!(
            "activation must be non-negative, found {v}"
        )));
    }
    let total: f64 = activation.sum();
    if total <= 0.0 {
        return Ok(EntropyMap {
            values: Array2::zeros(activation.dim()),
            degenerate: true,
        });
    }
    Ok(EntropyMap {
        values: activation.mapv(|a| a / total),
        degenerate: false,
    })
}

/// Draws up to `k` distinct pixels, each draw proportional to the remaining
/// probability mass. Returns every supported pixel when fewer than `k` exist.
pub fn sample_points(
    entropy: &EntropyMap,
    k: usize,
    rng: &mut impl Rng,
    patch_id: impl Into<String>,
) -> Result<PointPromptSet> {
    if k == 0 {
        return Err(Error::Config("point count k must be at least 1".into()));
    }
    if entropy.degenerate || entropy.values.iter().all(|&v| v <= 0.0) {
        return Err(Error::Sampling(
            "activation map has no positive mass; skip this patch".into(),
        ));
    }
    let w = entropy.values.dim().1;
    let mut weights: Vec<f64> = entropy.values.iter().copied().collect();
    let support = weights.iter().filter(|&&v| v > 0.0).count();
    let mut points = Vec::with_capacity(k.min(support));
    for _ in 0..k.min(support) {
        let total: f64 = weights.iter().sum();
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (idx, &wt) in weights.iter().enumerate() {
            if wt <= 0.0 {
                continue;
            }
            acc += wt;
            chosen = Some(idx);
            if target < acc {
                break;
            }
        }
        let idx = chosen.expect("positive mass remains");
        weights[idx] = 0.0;
        points.push(PointPrompt {
            row: idx / w,
            col: idx % w,
        });
    }
    Ok(PointPromptSet {
        patch_id: patch_id.into(),
        points,
        polarity: Polarity::Foreground,
    })
}

#[derive(Serialize, Deserialize)]
struct PromptLine {
    patch_id: String,
    points: Vec<[usize; 2]>,
}

/// Writes one JSON object per line: `{"patch_id": .., "points": [[r, c], ..]}`.
pub fn write_prompts_jsonl(path: &Path, sets: &[PointPromptSet]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for set in sets {
        let line = PromptLine {
            patch_id: set.patch_id.clone(),
            points: set.points.iter().map(|p| [p.row, p.col]).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_prompts_jsonl(path: &Path) -> Result<Vec<PointPromptSet>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PromptLine = serde_json::from_str(&line)?;
        sets.push(PointPromptSet {
            patch_id: parsed.patch_id,
            points: parsed
                .points
                .into_iter()
                .map(|[row, col]| PointPrompt { row, col })
                .collect(),
            polarity: Polarity::Foreground,
        });
    }
    Ok(sets)
}
