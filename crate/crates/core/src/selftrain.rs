//! Pseudo-label selection by intersection-over-segmenter-area and the
//! iterative decoder retraining loop.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dice, iou};
use crate::grid::BinaryMask;
use crate::pepm::PointPromptSet;
use crate::postproc::{quantile_sorted, InitialMask};
use crate::segmenter::{
    finetune_decoder, init_decoder, Decoder, DecoderHyper, ImageEmbedding, PredictedMask,
    TrainingExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdsScore {
    pub value: f64,
    /// The segmenter mask was empty; `value` is then 0.
    pub degenerate: bool,
}

/// `|initial ∩ predicted| / |predicted|`.
pub fn ids(initial: &BinaryMask, predicted: &BinaryMask) -> Result<IdsScore> {
    if initial.dim() != predicted.dim() {
        return Err(Error::Shape(format!(
            "initial mask {:?} vs predicted mask {:?}",
            initial.dim(),
            predicted.dim()
        )));
    }
    let area = predicted.count();
    if area == 0 {
        return Ok(IdsScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(IdsScore {
        value: initial.intersection_count(predicted) as f64 / area as f64,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub mask: BinaryMask,
    pub ids: IdsScore,
    pub iteration: usize,
}

/// Selected pseudo labels keyed by patch id; a later selection replaces an earlier one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub records: BTreeMap<String, PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, patch_id: &str) -> Option<&PseudoLabel> {
        self.records.get(patch_id)
    }
}

/// One row of the per-iteration selection ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub patch_id: String,
    pub ids: f64,
    pub selected: bool,
    pub iteration: usize,
}

/// Inserts every candidate with `ids > t` into `set`, replacing older
/// records for the same patch. Returns the ledger for all candidates.
pub fn select(
    candidates: &[(InitialMask, PredictedMask)],
    t: f64,
    iteration: usize,
    set: &mut PseudoLabelSet,
) -> Result<Vec<SelectionEntry>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("selection threshold must lie in (0, 1], got {t}")));
    }
    let mut ledger = Vec::with_capacity(candidates.len());
    for (initial, predicted) in candidates {
        let score = ids(&initial.mask, &predicted.mask)?;
        let selected = score.value > t;
        if selected {
            set.records.insert(
                predicted.patch_id.clone(),
                PseudoLabel {
                    mask: predicted.mask.clone(),
                    ids: score,
                    iteration,
                },
            );
        }
        ledger.push(SelectionEntry {
            patch_id: predicted.patch_id.clone(),
            ids: score.value,
            selected,
            iteration,
        });
    }
    Ok(ledger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub threshold: f64,
    pub iterations: usize,
    pub base_seed: u64,
    /// Explicit decoder seeds per iteration; defaults to `base_seed + n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            iterations: 3,
            base_seed: 0,
            seeds: None,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one retraining iteration is required".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() < self.iterations {
                return Err(Error::Config(format!(
                    "{} seeds given for {} iterations",
                    seeds.len(),
                    self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Decoder seed of 1-based iteration `n`.
    pub fn seed_for(&self, n: usize) -> u64 {
        match &self.seeds {
            Some(s) => s[n - 1],
            None => self.base_seed + n as u64,
        }
    }
}

/// Everything the loop needs about one positive training patch.
#[derive(Debug, Clone)]
pub struct RetrainInput {
    pub embedding: ImageEmbedding,
    pub initial: InitialMask,
    pub prompts: PointPromptSet,
    /// Ground truth, used only for the quality metrics.
    pub ground_truth: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub phase: String,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub n_selected: usize,
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub iteration: usize,
    pub ledger: Vec<SelectionEntry>,
    pub pseudo_labels: PseudoLabelSet,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub pseudo_labels: PseudoLabelSet,
    pub decoder: Decoder,
    pub metrics: Vec<IterationMetrics>,
    pub iterations: Vec<IterationResult>,
}

pub fn predict_all(decoder: &Decoder, inputs: &[RetrainInput]) -> Result<Vec<PredictedMask>> {
    inputs
        .par_iter()
        .map(|inp| decoder.predict(&inp.embedding, &inp.prompts))
        .collect()
}

fn quality_row(phase: &str, predictions: &[PredictedMask], inputs: &[RetrainInput], n_selected: usize) -> IterationMetrics {
    let scored: Vec<(f64, f64)> = predictions
        .iter()
        .zip(inputs)
        .filter_map(|(p, inp)| inp.ground_truth.as_ref().map(|g| (dice(&p.mask, g), iou(&p.mask, g))))
        .collect();
    let n = scored.len().max(1) as f64;
    IterationMetrics {
        phase: phase.to_string(),
        mean_dice: 100.0 * scored.iter().map(|s| s.0).sum::<f64>() / n,
        mean_iou: 100.0 * scored.iter().map(|s| s.1).sum::<f64>() / n,
        n_selected,
    }
}

fn ids_percentiles(ledger: &[SelectionEntry]) -> String {
    let mut v: Vec<f64> = ledger.iter().map(|e| e.ids).collect();
    if v.is_empty() {
        return "no candidates".into();
    }
    v.sort_by(f64::total_cmp);
    format!(
        "p10 {:.3}, p50 {:.3}, p90 {:.3}, max {:.3}",
        quantile_sorted(&v, 0.1),
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.9),
        v[v.len() - 1]
    )
}

/// Runs `cfg.iterations` rounds of predict → select → re-initialize → retrain,
/// starting from a preliminarily fine-tuned decoder.
///
/// Metric rows: `preliminary` scores the starting decoder, row `n` scores the
/// decoder trained in iteration `n`, both against ground truth where known.
pub fn iterate(
    inputs: &[RetrainInput],
    preliminary: &Decoder,
    cfg: &RetrainConfig,
    hyper: &DecoderHyper,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Config("no positive patches to retrain on".into()));
    }
    let mut pseudo_labels = PseudoLabelSet::default();
    let mut decoder = preliminary.clone();
    let mut predictions = predict_all(&decoder, inputs)?;
    let mut metrics = vec![quality_row("preliminary", &predictions, inputs, 0)];
    let mut iterations = Vec::with_capacity(cfg.iterations);

    for n in 1..=cfg.iterations {
        let candidates: Vec<(InitialMask, PredictedMask)> = inputs
            .iter()
            .zip(predictions)
            .map(|(inp, p)| (inp.initial.clone(), p))
            .collect();
        let ledger = select(&candidates, cfg.threshold, n, &mut pseudo_labels)?;
        if pseudo_labels.is_empty() {
            return Err(Error::Selection(format!(
                "no pseudo label passed IDS > {} in iteration {n} ({})",
                cfg.threshold,
                ids_percentiles(&ledger)
            )));
        }
        let by_id: BTreeMap<&str, &RetrainInput> = inputs
            .iter()
            .map(|inp| (inp.prompts.patch_id.as_str(), inp))
            .collect();
        let examples: Vec<TrainingExample> = pseudo_labels
            .records
            .iter()
            .map(|(id, label)| {
                let inp = by_id[id.as_str()];
                TrainingExample {
                    embedding: inp.embedding.clone(),
                    target: label.mask.clone(),
                    prompts: inp.prompts.clone(),
                }
            })
            .collect();
        let fresh = init_decoder(cfg.seed_for(n));
        decoder = finetune_decoder(&examples, &fresh, hyper)?;
        predictions = predict_all(&decoder, inputs)?;
        let row = quality_row(&n.to_string(), &predictions, inputs, pseudo_labels.len());
        log::info!(
            "iteration {n}: {} pseudo labels, dice {:.2}, iou {:.2}",
            row.n_selected,
            row.mean_dice,
            row.mean_iou
        );
        metrics.push(row);
        iterations.push(IterationResult {
            iteration: n,
            ledger,
            pseudo_labels: pseudo_labels.clone(),
            decoder: decoder.clone(),
        });
    }
    Ok(RetrainOutcome {
        pseudo_labels,
        decoder,
        metrics,
        iterations,
    })
}
