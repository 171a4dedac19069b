//! Patch classifier with attention dropout and an explicit high-frequency
//! prompt channel, and the class activation maps it produces.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{min_max_normalize, resize_bilinear, Patch};
use crate::nn::{
    bce_with_logit, global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid,
    Adam, Conv2d, ConvCache, Initializer, Linear, Params,
};
use crate::syndata::{Dataset, Split};
use crate::weights::WeightsFile;

pub const WEIGHTS_KIND: &str = "classifier";

/// High-frequency content of a patch: per-channel FFT, remove the centered
/// low-frequency square, inverse FFT, magnitude, channel mean, min–max.
pub fn extract_evp(patch: &Patch, freq_cut_ratio: f64) -> Result<Array2<f64>> {
    if !(freq_cut_ratio > 0.0 && freq_cut_ratio < 1.0) {
        return Err(Error::Config(format!(
            "frequency cut ratio must lie in (0, 1), got {freq_cut_ratio}"
        )));
    }
    let (h, w, c) = patch.pixels.dim();
    if h != w {
        return Err(Error::Shape(format!("EVP needs a square patch, got {h}x{w}")));
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let plane = patch.pixels.index_axis(Axis(2), ch).to_owned();
        acc += &high_pass_magnitude(&plane, freq_cut_ratio);
    }
    acc /= c as f64;
    Ok(min_max_normalize(&acc))
}

/// Magnitude of the image with all frequencies `|f_row|, |f_col| ≤ ⌊ratio·N/2⌋` removed.
pub fn high_pass_magnitude(plane: &Array2<f64>, freq_cut_ratio: f64) -> Array2<f64> {
    let (h, w) = plane.dim();
    let half = (freq_cut_ratio * h.min(w) as f64 / 2.0).floor() as i64;
    let signed = |k: usize, n: usize| -> i64 {
        if k < n.div_ceil(2) {
            k as i64
        } else {
            k as i64 - n as i64
        }
    };
    let mut spectrum: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut spectrum, h, w, false);
    for i in 0..h {
        for j in 0..w {
            if signed(i, h).abs() <= half && signed(j, w).abs() <= half {
                spectrum[i * w + j] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fft2(&mut spectrum, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Array2::from_shape_vec((h, w), spectrum.iter().map(|z| z.norm() * scale).collect())
        .expect("shape matches")
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = data[i * w + j];
        }
        col_fft.process(&mut column);
        for i in 0..h {
            data[i * w + j] = column[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdlConfig {
    /// Drop threshold as a fraction of the attention map's maximum.
    pub drop_threshold_ratio: f64,
    /// Probability of applying the drop mask instead of the importance map.
    pub drop_rate: f64,
    /// 1-based backbone stages whose first block is followed by ADL.
    pub attach_points: Vec<usize>,
}

impl Default for AdlConfig {
    fn default() -> Self {
        Self {
            drop_threshold_ratio: 0.9,
            drop_rate: 0.75,
            attach_points: vec![3, 4],
        }
    }
}

impl AdlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_threshold_ratio > 0.0 && self.drop_threshold_ratio < 1.0) {
            return Err(Error::Config(format!(
                "drop_threshold_ratio must lie in (0, 1), got {}",
                self.drop_threshold_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "drop_rate must lie in [0, 1], got {}",
                self.drop_rate
            )));
        }
        if self.attach_points.iter().any(|&p| p == 0 || p > STAGES) {
            return Err(Error::Config(format!(
                "ADL attach points must be stages 1..={STAGES}, got {:?}",
                self.attach_points
            )));
        }
        Ok(())
    }
}

/// Which map an ADL step multiplies into the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdlBranch {
    Identity,
    Drop,
    Importance,
}

/// Channel-wise mean of `C × H × W` features.
pub fn attention_map(features: &Array3<f64>) -> Array2<f64> {
    features.mean_axis(Axis(0)).expect("at least one channel")
}

/// 0 where attention exceeds `ratio × max`, 1 elsewhere.
pub fn drop_mask(attention: &Array2<f64>, ratio: f64) -> Array2<f64> {
    let max = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = ratio * max;
    attention.mapv(|a| if a > threshold { 0.0 } else { 1.0 })
}

pub fn importance_map(attention: &Array2<f64>) -> Array2<f64> {
    attention.mapv(sigmoid)
}

/// Attention dropout. At inference (`training == false`) it is the identity.
pub fn adl_forward(
    features: &Array3<f64>,
    cfg: &AdlConfig,
    rng: &mut impl Rng,
    training: bool,
) -> Array3<f64> {
    let branch = choose_branch(cfg, rng, training);
    adl_apply(features, cfg, branch).0
}

fn choose_branch(cfg: &AdlConfig, rng: &mut impl Rng, training: bool) -> AdlBranch {
    if !training {
        AdlBranch::Identity
    } else if rng.gen::<f64>() < cfg.drop_rate {
        AdlBranch::Drop
    } else {
        AdlBranch::Importance
    }
}

pub struct AdlCache {
    branch: AdlBranch,
    map: Array2<f64>,
    input: Array3<f64>,
}

pub fn adl_apply(features: &Array3<f64>, cfg: &AdlConfig, branch: AdlBranch) -> (Array3<f64>, AdlCache) {
    let map = match branch {
        AdlBranch::Identity => {
            return (
                features.clone(),
                AdlCache {
                    branch,
                    map: Array2::zeros((0, 0)),
                    input: Array3::zeros((0, 0, 0)),
                },
            )
        }
        AdlBranch::Drop => drop_mask(&attention_map(features), cfg.drop_threshold_ratio),
        AdlBranch::Importance => importance_map(&attention_map(features)),
    };
    let out = features * &map.view().insert_axis(Axis(0));
    (
        out,
        AdlCache {
            branch,
            map,
            input: features.clone(),
        },
    )
}

/// Backward pass of [`adl_apply`]. The drop mask is treated as a constant;
/// the importance map propagates through the channel mean.
pub fn adl_backward(cache: &AdlCache, grad: &Array3<f64>) -> Array3<f64> {
    match cache.branch {
        AdlBranch::Identity => grad.clone(),
        AdlBranch::Drop => grad * &cache.map.view().insert_axis(Axis(0)),
        AdlBranch::Importance => {
            let channels = cache.input.dim().0 as f64;
            let mut out = grad * &cache.map.view().insert_axis(Axis(0));
            let gx = (grad * &cache.input).sum_axis(Axis(0));
            let dmap = &gx * &cache.map.mapv(|s| s * (1.0 - s)) / channels;
            out += &dmap.view().insert_axis(Axis(0));
            out
        }
    }
}

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub channels: [usize; STAGES],
    pub strides: [usize; STAGES],
    pub freq_cut_ratio: f64,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            in_channels: 4,
            channels: [16, 32, 64, 128],
            strides: [1, 2, 2, 2],
            freq_cut_ratio: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Random quarter-turn rotations of training inputs.
    pub rotate_augment: bool,
}

impl ClassifierHyper {
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 10,
            rotate_augment: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 50,
            rotate_augment: false,
        }
    }
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub valid_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Trained classifier parameters together with the records describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub adl: AdlConfig,
    pub hyper: ClassifierHyper,
    pub record: TrainingRecord,
    pub params: Params,
    convs: [Conv2d; STAGES],
    head: Linear,
}

pub type ClassifierWeights = Classifier;

pub struct ForwardTrace {
    conv_caches: Vec<ConvCache>,
    relu_outs: Vec<Array3<f64>>,
    adl_caches: Vec<Option<AdlCache>>,
    stage_outs: Vec<Array3<f64>>,
    pooled: Array1<f64>,
}

impl ForwardTrace {
    /// Output of the last stage, the features the CAM is built from.
    pub fn final_features(&self) -> &Array3<f64> {
        self.stage_outs.last().expect("at least one stage")
    }
}

impl Classifier {
    pub fn new(arch: ClassifierArch, adl: AdlConfig, hyper: ClassifierHyper, seed: u64) -> Self {
        let mut params = Params::new();
        let mut init = Initializer::new(seed);
        let mut in_ch = arch.in_channels;
        let convs = std::array::from_fn(|k| {
            let conv = Conv2d::register(
                &mut params,
                &mut init,
                &format!("stage{}", k + 1),
                in_ch,
                arch.channels[k],
                3,
                arch.strides[k],
            );
            in_ch = arch.channels[k];
            conv
        });
        let head = Linear::register(&mut params, &mut init, "head", in_ch, 1);
        Self {
            arch,
            adl,
            hyper,
            record: TrainingRecord {
                seed,
                ..TrainingRecord::default()
            },
            params,
            convs,
            head,
        }
    }

    /// Stacks RGB and the EVP into the classifier's channel-first input.
    pub fn make_input(&self, patch: &Patch, evp: &Array2<f64>) -> Result<Array3<f64>> {
        let rgb = patch.to_chw();
        if evp.dim() != (rgb.dim().1, rgb.dim().2) {
            return Err(Error::Shape(format!(
                "EVP shape {:?} does not match patch {:?}",
                evp.dim(),
                (rgb.dim().1, rgb.dim().2)
            )));
        }
        let x = concatenate(Axis(0), &[rgb.view(), evp.view().insert_axis(Axis(0))])
            .expect("matching spatial dims");
        if x.dim().0 != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "classifier expects {} input channels, input has {}",
                self.arch.in_channels,
                x.dim().0
            )));
        }
        Ok(x)
    }

    pub fn input_for(&self, patch: &Patch) -> Result<Array3<f64>> {
        let evp = extract_evp(patch, self.arch.freq_cut_ratio)?;
        self.make_input(patch, &evp)
    }

    /// Forward pass with one ADL branch per attach point (`Identity` at inference).
    pub fn forward_with(&self, params: &Params, x: &Array3<f64>, branches: &[AdlBranch]) -> (f64, ForwardTrace) {
        let mut conv_caches = Vec::with_capacity(STAGES);
        let mut relu_outs = Vec::with_capacity(STAGES);
        let mut adl_caches = Vec::with_capacity(STAGES);
        let mut stage_outs = Vec::with_capacity(STAGES);
        let mut h = x.clone();
        let mut next_branch = branches.iter();
        for (k, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward(params, &h);
            conv_caches.push(cache);
            let r = relu(y);
            let out = if self.adl.attach_points.contains(&(k + 1)) {
                let branch = next_branch.next().copied().unwrap_or(AdlBranch::Identity);
                let (out, cache) = adl_apply(&r, &self.adl, branch);
                adl_caches.push(Some(cache));
                out
            } else {
                adl_caches.push(None);
                r.clone()
            };
            relu_outs.push(r);
            stage_outs.push(out.clone());
            h = out;
        }
        let pooled = global_avg_pool(&h);
        let logit = self.head.forward(params, &pooled)[0];
        (
            logit,
            ForwardTrace {
                conv_caches,
                relu_outs,
                adl_caches,
                stage_outs,
                pooled,
            },
        )
    }

    pub fn backward(&self, params: &Params, trace: &ForwardTrace, dlogit: f64, grads: &mut Params) {
        let gp = self
            .head
            .backward(params, &trace.pooled, &Array1::from_elem(1, dlogit), grads);
        let mut g = global_avg_pool_backward(&gp, trace.final_features().dim());
        for k in (0..STAGES).rev() {
            if let Some(cache) = &trace.adl_caches[k] {
                g = adl_backward(cache, &g);
            }
            g = relu_backward(&trace.relu_outs[k], g);
            match self.convs[k].backward(params, &trace.conv_caches[k], &g, grads, k > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    pub fn adl_count(&self) -> usize {
        self.adl.attach_points.len()
    }

    /// BCE loss and parameter gradients for one sample under fixed ADL branches.
    pub fn loss_and_grads(&self, params: &Params, x: &Array3<f64>, target: f64, branches: &[AdlBranch]) -> (f64, Params) {
        let (logit, trace) = self.forward_with(params, x, branches);
        let (loss, dlogit) = bce_with_logit(logit, target);
        let mut grads = params.zeros_like();
        self.backward(params, &trace, dlogit, &mut grads);
        (loss, grads)
    }

    pub fn logit(&self, x: &Array3<f64>) -> f64 {
        self.forward_with(&self.params, x, &[]).0
    }

    pub fn predict_prob(&self, patch: &Patch) -> Result<f64> {
        Ok(sigmoid(self.logit(&self.input_for(patch)?)))
    }

    /// Class-evidence map at feature resolution (before ReLU and upsampling).
    pub fn class_evidence(&self, x: &Array3<f64>) -> Array2<f64> {
        let (_, trace) = self.forward_with(&self.params, x, &[]);
        let features = trace.final_features();
        let w = self.params.matrix(self.head.weight);
        let mut map = Array2::zeros((features.dim().1, features.dim().2));
        for (c, plane) in features.axis_iter(Axis(0)).enumerate() {
            map.scaled_add(w[[0, c]], &plane);
        }
        map
    }

    /// Index of the head weight tensor, exposed for weight-scaling checks.
    pub fn head_weight_index(&self) -> usize {
        self.head.weight
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            kind: WEIGHTS_KIND.into(),
            architecture: serde_json::json!({ "arch": self.arch, "adl": self.adl }),
            hyper: serde_json::to_value(&self.hyper).expect("serializable"),
            meta: serde_json::to_value(&self.record).expect("serializable"),
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: &WeightsFile) -> Result<Self> {
        file.expect_kind(WEIGHTS_KIND)?;
        let arch: ClassifierArch = serde_json::from_value(file.architecture["arch"].clone())?;
        let adl: AdlConfig = serde_json::from_value(file.architecture["adl"].clone())?;
        let hyper: ClassifierHyper = serde_json::from_value(file.hyper.clone())?;
        let record: TrainingRecord = serde_json::from_value(file.meta.clone())?;
        let mut model = Classifier::new(arch, adl, hyper, record.seed);
        if model.params.names != file.params.names
            || model
                .params
                .values
                .iter()
                .zip(&file.params.values)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("classifier tensor layout mismatch".into()));
        }
        model.params = file.params.clone();
        model.record = record;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightsFile::load(path)?)
    }
}

/// Trains on image-level labels only; returns the best-validation-accuracy epoch.
pub fn train_classifier(
    dataset: &Dataset,
    arch: &ClassifierArch,
    adl: &AdlConfig,
    hyper: &ClassifierHyper,
    seed: u64,
) -> Result<Classifier> {
    adl.validate()?;
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let mut model = Classifier::new(arch.clone(), adl.clone(), hyper.clone(), seed);
    let load = |split: Split| -> Result<Vec<(Array3<f64>, f64)>> {
        let data = dataset.load_split(split)?;
        if data.is_empty() {
            return Err(Error::Config(format!("{} split is empty", split.name())));
        }
        data.iter()
            .map(|(p, _)| Ok((model.input_for(p)?, p.label.as_target())))
            .collect()
    };
    let train = load(Split::Train)?;
    let valid = load(Split::Valid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5EED);
    let mut opt = Adam::new(&model.params, hyper.lr, hyper.weight_decay, false);
    let mut best: Option<(f64, usize, Params)> = None;
    let mut record = TrainingRecord {
        seed,
        ..TrainingRecord::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let (x, y) = &train[i];
                let turns = if hyper.rotate_augment { rng.gen_range(0..4) } else { 0 };
                let x = rotate_chw(x, turns);
                let branches: Vec<AdlBranch> = (0..model.adl_count())
                    .map(|_| choose_branch(&model.adl, &mut rng, true))
                    .collect();
                let (loss, g) = model.loss_and_grads(&model.params, &x, *y, &branches);
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        detail: "classifier loss is not finite".into(),
                    });
                }
                epoch_loss += loss;
                for (acc, gi) in grads.values.iter_mut().zip(g.values) {
                    *acc += &gi;
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grads, None);
        }
        if !model.params.all_finite() {
            return Err(Error::Training {
                epoch,
                detail: "classifier parameters are not finite".into(),
            });
        }
        let correct = valid
            .iter()
            .filter(|(x, y)| (model.logit(x) > 0.0) == (*y > 0.5))
            .count();
        let acc = correct as f64 / valid.len() as f64;
        record.valid_accuracy.push(acc);
        record.train_loss.push(epoch_loss / train.len() as f64);
        log::info!("classifier epoch {epoch}: loss {:.4} valid acc {acc:.3}", epoch_loss / train.len() as f64);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.params.clone()));
        }
    }
    let (acc, epoch, params) = best.expect("at least one epoch");
    record.best_epoch = epoch;
    record.best_valid_accuracy = acc;
    model.params = params;
    model.record = record;
    Ok(model)
}

fn rotate_chw(x: &Array3<f64>, turns: usize) -> Array3<f64> {
    if turns.is_multiple_of(4) {
        return x.clone();
    }
    let mut out = x.clone();
    for (c, plane) in x.axis_iter(Axis(0)).enumerate() {
        out.slice_mut(s![c, .., ..])
            .assign(&crate::grid::rot90(&plane.to_owned(), turns));
    }
    out
}

/// Per-pixel class evidence at patch resolution, min–max normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedCam {
    pub patch_id: String,
    pub values: Array2<f64>,
}

/// CAM from the positive-class head weights over the last-stage features,
/// ReLU-clamped, bilinearly upsampled and normalized to `[0, 1]`.
pub fn extract_cam(model: &Classifier, patch: &Patch, evp: &Array2<f64>) -> Result<EnhancedCam> {
    let x = model.make_input(patch, evp)?;
    let evidence = model.class_evidence(&x).mapv(|v| v.max(0.0));
    let n = patch.size();
    Ok(EnhancedCam {
        patch_id: patch.id.clone(),
        values: cam_from_evidence(&evidence, n, n),
    })
}

pub fn cam_from_evidence(evidence: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    if evidence.iter().all(|&v| v <= 0.0) {
        return Array2::zeros((h, w));
    }
    min_max_normalize(&resize_bilinear(evidence, h, w))
}

/// [`extract_cam`] with the EVP computed from the patch itself.
pub fn cam_for_patch(model: &Classifier, patch: &Patch) -> Result<EnhancedCam> {
    let evp = extract_evp(patch, model.arch.freq_cut_ratio)?;
    extract_cam(model, patch, &evp)
}
