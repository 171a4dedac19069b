//! Stage functions behind the CLI and the resumable end-to-end runner.
//!
//! Every stage reads its inputs from disk and writes its outputs to disk, so
//! a resumed run sees exactly the bytes a fresh run would. Per-patch work
//! runs on the rayon pool; files are written afterwards from one thread. Run layout:
//!
//! ```text
//! <run>/config.json
//! <run>/data/{manifest.json, patches/, masks/}
//! <run>/cam/classifier.bin
//! <run>/cams/{<id>_cam.png, <id>_cam0.png, scores.json}
//! <run>/initmask/<id>_init.png
//! <run>/prompts/prompts.jsonl
//! <run>/segmenter/{encoder.bin, decoder_preliminary.bin}
//! <run>/selftrain/{iter_<n>/, metrics.csv, decoder.bin}
//! <run>/infer/<id>_pred.png
//! <run>/report/{report.txt, report.json, trends.json, trends.csv, trends.png}
//! <run>/stages/<stage>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cam::{cam_for_patch, train_classifier, Classifier};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_masks, EvalReport};
use crate::grid::{load_map_png16, save_map_png16, BinaryMask, Patch};
use crate::pepm::{entropy_map, read_prompts_jsonl, sample_points, write_prompts_jsonl, PointPromptSet};
use crate::postproc::{initial_mask_from_fused, raw_threshold, rotate_fuse, InitialMask};
use crate::report::emit_report;
use crate::segmenter::{finetune_decoder, init_decoder, Decoder, Encoder, TrainingExample};
use crate::selftrain::{iterate, IterationMetrics, RetrainInput};
use crate::syndata::{build_dataset, mix_seed, Dataset, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};

pub const STAGES: [&str; 8] = [
    "synth",
    "train-cam",
    "extract-cam",
    "initmask",
    "prompts",
    "pretrain-decoder",
    "selftrain",
    "infer",
];

pub const EVAL_STAGE: &str = "eval";

/// Paths of every artifact in a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_FILE)
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("cam").join("classifier.bin")
    }
    pub fn cams(&self) -> PathBuf {
        self.root.join("cams")
    }
    pub fn initmask(&self) -> PathBuf {
        self.root.join("initmask")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts").join("prompts.jsonl")
    }
    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter")
    }
    pub fn encoder(&self) -> PathBuf {
        self.segmenter().join("encoder.bin")
    }
    pub fn preliminary_decoder(&self) -> PathBuf {
        self.segmenter().join("decoder_preliminary.bin")
    }
    pub fn selftrain(&self) -> PathBuf {
        self.root.join("selftrain")
    }
    pub fn final_decoder(&self) -> PathBuf {
        self.selftrain().join("decoder.bin")
    }
    pub fn infer(&self) -> PathBuf {
        self.root.join("infer")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn stages(&self) -> PathBuf {
        self.root.join("stages")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn cam_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_cam.png"))
}

pub fn single_cam_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_cam0.png"))
}

pub fn init_mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_init.png"))
}

pub fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.png"))
}

pub const SCORES_FILE: &str = "scores.json";

pub fn synth(cfg: &PipelineConfig, data_dir: &Path) -> Result<DatasetManifest> {
    ensure_dir(data_dir)?;
    build_dataset(&cfg.syndata, cfg.seed, data_dir)
}

pub fn train_cam(cfg: &PipelineConfig, manifest: &Path, weights: &Path) -> Result<Classifier> {
    let dataset = Dataset::open(manifest)?;
    let model = train_classifier(&dataset, &cfg.cam.arch, &cfg.cam.adl, &cfg.cam.hyper, cfg.cam.seed)?;
    ensure_parent(weights)?;
    model.save(weights)?;
    Ok(model)
}

/// Rotate-fused CAM (`<id>_cam.png`), single-orientation CAM (`<id>_cam0.png`)
/// and the classifier's positive probability (`scores.json`) for every patch.
pub fn extract_cams(manifest: &Path, weights: &Path, out_dir: &Path) -> Result<BTreeMap<String, f64>> {
    let dataset = Dataset::open(manifest)?;
    let model = Classifier::load(weights)?;
    ensure_dir(out_dir)?;
    let computed: Vec<(String, Array2<f64>, Array2<f64>, f64)> = dataset
        .manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (patch, _) = dataset.load_entry(entry)?;
            let single = cam_for_patch(&model, &patch)?;
            let fused = rotate_fuse(|p: &Patch| cam_for_patch(&model, p), &patch)?;
            Ok((entry.id.clone(), fused.values, single.values, model.predict_prob(&patch)?))
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(computed.len());
    for (id, fused, single, prob) in computed {
        save_map_png16(&fused, &cam_path(out_dir, &id))?;
        save_map_png16(&single, &single_cam_path(out_dir, &id))?;
        scores.push((id, prob));
    }
    let scores: BTreeMap<String, f64> = scores.into_iter().collect();
    write_json(&out_dir.join(SCORES_FILE), &scores)?;
    Ok(scores)
}

pub fn initmasks(manifest: &Path, cams_dir: &Path, cfg: &crate::postproc::PostprocConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let dataset = Dataset::open(manifest)?;
    ensure_dir(out_dir)?;
    let masks: Vec<(String, BinaryMask)> = dataset
        .manifest
        .entries
        .par_iter()
        .map(|entry| {
            let fused = crate::cam::EnhancedCam {
                patch_id: entry.id.clone(),
                values: load_map_png16(&cam_path(cams_dir, &entry.id))?,
            };
            Ok((entry.id.clone(), initial_mask_from_fused(&fused, cfg).mask))
        })
        .collect::<Result<_>>()?;
    for (id, mask) in masks {
        mask.save_png(&init_mask_path(out_dir, &id))?;
    }
    Ok(())
}

/// Samples `k` prompts per patch from its fused CAM. Patches whose CAM has
/// no positive mass get no line.
pub fn prompts(manifest: &Path, cams_dir: &Path, k: usize, seed: u64, out: &Path) -> Result<Vec<PointPromptSet>> {
    let dataset = Dataset::open(manifest)?;
    let sets: Vec<Option<PointPromptSet>> = dataset
        .manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let cam = load_map_png16(&cam_path(cams_dir, &entry.id))?;
            let e = entropy_map(&cam)?;
            if e.degenerate {
                return Ok(None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            sample_points(&e, k, &mut rng, entry.id.clone()).map(Some)
        })
        .collect::<Result<_>>()?;
    let sets: Vec<PointPromptSet> = sets.into_iter().flatten().collect();
    ensure_parent(out)?;
    write_prompts_jsonl(out, &sets)?;
    Ok(sets)
}

fn prompt_index(sets: Vec<PointPromptSet>) -> BTreeMap<String, PointPromptSet> {
    sets.into_iter().map(|s| (s.patch_id.clone(), s)).collect()
}

/// Positive training patches with their frozen embedding, initial mask and prompts.
pub fn training_inputs(
    dataset: &Dataset,
    encoder: &Encoder,
    init_dir: &Path,
    prompts: &BTreeMap<String, PointPromptSet>,
) -> Result<Vec<RetrainInput>> {
    let entries: Vec<&ManifestEntry> = dataset
        .manifest
        .split(Split::Train)
        .filter(|e| e.label.is_positive() && prompts.contains_key(&e.id))
        .collect();
    let inputs: Vec<Option<RetrainInput>> = entries
        .par_iter()
        .map(|entry| {
            let (patch, gt) = dataset.load_entry(entry)?;
            let mask = BinaryMask::load_png(&init_mask_path(init_dir, &entry.id))?;
            if mask.count() == 0 {
                return Ok(None);
            }
            Ok(Some(RetrainInput {
                embedding: encoder.encode_image(&patch)?,
                initial: InitialMask {
                    patch_id: entry.id.clone(),
                    mask,
                },
                prompts: prompts[&entry.id].clone(),
                ground_truth: Some(gt.mask),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(inputs.into_iter().flatten().collect())
}

pub fn pretrain_decoder(
    cfg: &PipelineConfig,
    manifest: &Path,
    init_dir: &Path,
    prompts_path: &Path,
    encoder_out: &Path,
    decoder_out: &Path,
) -> Result<Decoder> {
    let dataset = Dataset::open(manifest)?;
    let encoder = Encoder::new(cfg.segmenter.encoder.clone(), cfg.segmenter.encoder_seed);
    ensure_parent(encoder_out)?;
    encoder.save(encoder_out)?;
    let encoder = Encoder::load(encoder_out)?;
    let prompts = prompt_index(read_prompts_jsonl(prompts_path)?);
    let inputs = training_inputs(&dataset, &encoder, init_dir, &prompts)?;
    let examples: Vec<TrainingExample> = inputs
        .into_iter()
        .map(|inp| TrainingExample {
            embedding: inp.embedding,
            target: inp.initial.mask,
            prompts: inp.prompts,
        })
        .collect();
    let decoder = finetune_decoder(&examples, &init_decoder(cfg.segmenter.decoder_seed), &cfg.segmenter.hyper)?;
    ensure_parent(decoder_out)?;
    decoder.save(decoder_out)?;
    Ok(decoder)
}

#[allow(clippy::too_many_arguments)]
pub fn selftrain(
    cfg: &PipelineConfig,
    manifest: &Path,
    init_dir: &Path,
    prompts_path: &Path,
    encoder_path: &Path,
    decoder_path: &Path,
    out_dir: &Path,
) -> Result<Vec<IterationMetrics>> {
    let dataset = Dataset::open(manifest)?;
    let encoder = Encoder::load(encoder_path)?;
    let preliminary = Decoder::load(decoder_path)?;
    let prompts = prompt_index(read_prompts_jsonl(prompts_path)?);
    let inputs = training_inputs(&dataset, &encoder, init_dir, &prompts)?;
    let outcome = iterate(&inputs, &preliminary, &cfg.selftrain, &cfg.segmenter.hyper)?;
    ensure_dir(out_dir)?;
    for it in &outcome.iterations {
        let dir = out_dir.join(format!("iter_{}", it.iteration));
        ensure_dir(&dir)?;
        for (id, label) in &it.pseudo_labels.records {
            label.mask.save_png(&dir.join(format!("{id}.png")))?;
        }
        write_json(&dir.join("ledger.json"), &it.ledger)?;
        it.decoder.save(&dir.join("decoder.bin"))?;
    }
    outcome.decoder.save(&out_dir.join("decoder.bin"))?;
    let csv = crate::report::trends_csv(&outcome.metrics);
    let path = out_dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    write_json(&out_dir.join("metrics.json"), &outcome.metrics)?;
    Ok(outcome.metrics)
}

/// Gated inference: patches the classifier scores as negative, or whose CAM
/// has no mass, get an empty mask without running the segmenter.
pub fn infer(
    manifest: &Path,
    cams_dir: &Path,
    prompts_path: &Path,
    encoder_path: &Path,
    decoder_path: &Path,
    splits: &[Split],
    out_dir: &Path,
) -> Result<()> {
    let dataset = Dataset::open(manifest)?;
    let encoder = Encoder::load(encoder_path)?;
    let decoder = Decoder::load(decoder_path)?;
    let scores: BTreeMap<String, f64> = read_json(&cams_dir.join(SCORES_FILE))?;
    let prompts = prompt_index(read_prompts_jsonl(prompts_path)?);
    ensure_dir(out_dir)?;
    let entries: Vec<&ManifestEntry> = dataset
        .manifest
        .entries
        .iter()
        .filter(|e| splits.contains(&e.split))
        .collect();
    let masks: Vec<(String, BinaryMask)> = entries
        .par_iter()
        .map(|entry| {
            let (patch, _) = dataset.load_entry(entry)?;
            let n = patch.size();
            let positive = scores.get(&entry.id).copied().unwrap_or(0.0) > 0.5;
            let mask = match prompts.get(&entry.id) {
                Some(p) if positive => decoder.predict(&encoder.encode_image(&patch)?, p)?.mask,
                _ => BinaryMask::zeros(n, n),
            };
            Ok((entry.id.clone(), mask))
        })
        .collect::<Result<_>>()?;
    for (id, mask) in masks {
        mask.save_png(&pred_path(out_dir, &id))?;
    }
    Ok(())
}

fn load_masks(
    dataset: &Dataset,
    entries: &[&ManifestEntry],
    path_for: impl Fn(&str) -> PathBuf + Sync,
) -> Result<(BTreeMap<String, BinaryMask>, BTreeMap<String, BinaryMask>)> {
    let pairs: Vec<(String, BinaryMask, BinaryMask)> = entries
        .par_iter()
        .map(|e| {
            let pred = BinaryMask::load_png(&path_for(&e.id))?;
            let gt = BinaryMask::load_png(&dataset.root.join(&e.mask))?;
            Ok((e.id.clone(), pred, gt))
        })
        .collect::<Result<_>>()?;
    let mut pred = BTreeMap::new();
    let mut gt = BTreeMap::new();
    for (id, p, g) in pairs {
        pred.insert(id.clone(), p);
        gt.insert(id, g);
    }
    Ok((pred, gt))
}

/// Scores of the segmenter on positive test patches with PEPM prompts and no
/// classifier gating, for a given decoder.
fn segmenter_scores(
    dataset: &Dataset,
    encoder: &Encoder,
    decoder: &Decoder,
    prompts: &BTreeMap<String, PointPromptSet>,
    split: Split,
    name: &str,
) -> Result<EvalReport> {
    let entries: Vec<&ManifestEntry> = dataset
        .manifest
        .split(split)
        .filter(|e| e.label.is_positive())
        .collect();
    let pairs: Vec<(String, BinaryMask, BinaryMask)> = entries
        .par_iter()
        .map(|e| {
            let (patch, gt) = dataset.load_entry(e)?;
            let n = patch.size();
            let pred = match prompts.get(&e.id) {
                Some(p) => decoder.predict(&encoder.encode_image(&patch)?, p)?.mask,
                None => BinaryMask::zeros(n, n),
            };
            Ok((e.id.clone(), pred, gt.mask))
        })
        .collect::<Result<_>>()?;
    let (pred, gt): (BTreeMap<_, _>, BTreeMap<_, _>) = pairs
        .into_iter()
        .map(|(id, p, g)| ((id.clone(), p), (id, g)))
        .unzip();
    eval_masks(name, &pred, &gt)
}

/// Builds the evaluation report for a finished run directory and emits it.
pub fn evaluate(cfg: &PipelineConfig, layout: &RunLayout) -> Result<EvalReport> {
    let dataset = Dataset::open(&layout.manifest())?;
    let mut report = EvalReport {
        run_id: run_id(cfg),
        config_hash: cfg.hash(),
        ..EvalReport::default()
    };
    for split in [Split::Valid, Split::Test] {
        let entries: Vec<&ManifestEntry> = dataset.manifest.split(split).collect();
        let (pred, gt) = load_masks(&dataset, &entries, |id| pred_path(&layout.infer(), id))?;
        report.merge(eval_masks(split.name(), &pred, &gt)?);
    }

    let test_pos: Vec<&ManifestEntry> = dataset
        .manifest
        .split(Split::Test)
        .filter(|e| e.label.is_positive())
        .collect();
    let (init, gt) = load_masks(&dataset, &test_pos, |id| init_mask_path(&layout.initmask(), id))?;
    report.merge(eval_masks("test_positive/initial_mask", &init, &gt)?);
    let raw: BTreeMap<String, BinaryMask> = test_pos
        .iter()
        .map(|e| {
            let cam = load_map_png16(&single_cam_path(&layout.cams(), &e.id))?;
            Ok((e.id.clone(), raw_threshold(&cam)))
        })
        .collect::<Result<_>>()?;
    report.merge(eval_masks("test_positive/raw_cam", &raw, &gt)?);

    let encoder = Encoder::load(&layout.encoder())?;
    let prompts = prompt_index(read_prompts_jsonl(&layout.prompts())?);
    let decoders = [
        ("test_positive/zero_shot", init_decoder(cfg.segmenter.decoder_seed)),
        ("test_positive/preliminary", Decoder::load(&layout.preliminary_decoder())?),
        ("test_positive/final", Decoder::load(&layout.final_decoder())?),
    ];
    for (name, dec) in &decoders {
        report.merge(segmenter_scores(&dataset, &encoder, dec, &prompts, Split::Test, name)?);
    }

    let trends: Vec<IterationMetrics> = read_json(&layout.selftrain().join("metrics.json"))?;
    emit_report(&report, &trends, &layout.report())?;
    Ok(report)
}

/// Short id derived from the config hash, stable across reruns.
pub fn run_id(cfg: &PipelineConfig) -> String {
    cfg.hash()[..12].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub inputs_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn stage_hash(cfg_hash: &str, stage: &str, upstream: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg_hash.as_bytes());
    h.update(b"\0");
    h.update(stage.as_bytes());
    h.update(b"\0");
    h.update(upstream.as_bytes());
    hex::encode(h.finalize())
}

fn stage_outputs(layout: &RunLayout, stage: &str) -> Vec<PathBuf> {
    match stage {
        "synth" => vec![layout.manifest()],
        "train-cam" => vec![layout.classifier()],
        "extract-cam" => vec![layout.cams().join(SCORES_FILE)],
        "initmask" => vec![layout.initmask()],
        "prompts" => vec![layout.prompts()],
        "pretrain-decoder" => vec![layout.encoder(), layout.preliminary_decoder()],
        "selftrain" => vec![layout.final_decoder(), layout.selftrain().join("metrics.json")],
        "infer" => vec![layout.infer()],
        _ => vec![
            layout.report().join("report.json"),
            layout.report().join("report.txt"),
            layout.report().join("trends.png"),
        ],
    }
}

fn run_stage(cfg: &PipelineConfig, layout: &RunLayout, stage: &str) -> Result<()> {
    match stage {
        "synth" => synth(cfg, &layout.data()).map(drop),
        "train-cam" => train_cam(cfg, &layout.manifest(), &layout.classifier()).map(drop),
        "extract-cam" => extract_cams(&layout.manifest(), &layout.classifier(), &layout.cams()).map(drop),
        "initmask" => initmasks(&layout.manifest(), &layout.cams(), &cfg.postproc, &layout.initmask()),
        "prompts" => prompts(&layout.manifest(), &layout.cams(), cfg.pepm.k, cfg.pepm.seed, &layout.prompts()).map(drop),
        "pretrain-decoder" => pretrain_decoder(
            cfg,
            &layout.manifest(),
            &layout.initmask(),
            &layout.prompts(),
            &layout.encoder(),
            &layout.preliminary_decoder(),
        )
        .map(drop),
        "selftrain" => selftrain(
            cfg,
            &layout.manifest(),
            &layout.initmask(),
            &layout.prompts(),
            &layout.encoder(),
            &layout.preliminary_decoder(),
            &layout.selftrain(),
        )
        .map(drop),
        "infer" => infer(
            &layout.manifest(),
            &layout.cams(),
            &layout.prompts(),
            &layout.encoder(),
            &layout.final_decoder(),
            &[Split::Valid, Split::Test],
            &layout.infer(),
        ),
        _ => evaluate(cfg, layout).map(drop),
    }
}

/// Runs every stage in order, skipping stages whose manifest matches the
/// current inputs and whose outputs still exist.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<(EvalReport, RunSummary)> {
    cfg.validate()?;
    let layout = RunLayout::new(out_dir);
    ensure_dir(&layout.stages())?;
    cfg.save(&layout.config())?;
    let cfg_hash = cfg.hash();
    let mut summary = RunSummary::default();
    let mut upstream = String::new();
    let mut dirty = false;
    for stage in STAGES.iter().copied().chain([EVAL_STAGE]) {
        let inputs_hash = stage_hash(&cfg_hash, stage, &upstream);
        let manifest_path = layout.stages().join(format!("{stage}.json"));
        let outputs = stage_outputs(&layout, stage);
        let done = !dirty
            && manifest_path.exists()
            && read_json::<StageManifest>(&manifest_path)
                .map(|m| m.inputs_hash == inputs_hash)
                .unwrap_or(false)
            && outputs.iter().all(|p| p.exists());
        if done {
            log::info!("stage {stage}: up to date");
            summary.skipped.push(stage.to_string());
        } else {
            log::info!("stage {stage}: running");
            // A stale manifest must not survive a failed rerun.
            let _ = fs::remove_file(&manifest_path);
            run_stage(cfg, &layout, stage).map_err(|e| Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            })?;
            write_json(
                &manifest_path,
                &StageManifest {
                    stage: stage.to_string(),
                    inputs_hash: inputs_hash.clone(),
                    outputs: outputs
                        .iter()
                        .map(|p| p.strip_prefix(&layout.root).unwrap_or(p).display().to_string())
                        .collect(),
                },
            )?;
            summary.executed.push(stage.to_string());
            dirty = true;
        }
        upstream = inputs_hash;
    }
    let report: EvalReport = read_json(&layout.report().join("report.json"))?;
    Ok((report, summary))
}
