//! Promptable segmenter: a frozen convolutional image encoder, a Gaussian
//! heatmap point-prompt encoder and a small trainable mask decoder with a
//! quality head, plus the Dice + IoU fine-tuning loop.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Patch};
use crate::nn::{
    global_avg_pool, relu, relu_backward, sigmoid, upsample2x,
    upsample2x_backward, Adam, Conv2d, ConvCache, Initializer, Linear, Params,
};
use crate::pepm::PointPromptSet;
use crate::weights::WeightsFile;

pub const ENCODER_KIND: &str = "encoder";
pub const DECODER_KIND: &str = "decoder";

/// Smoothing constant in both the Dice and the IoU term of [`seg_loss`].
pub const LOSS_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 64],
            strides: vec![2, 2, 1],
        }
    }
}

impl EncoderArch {
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().expect("non-empty encoder")
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Randomly initialized, never trained convolutional pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub seed: u64,
    pub params: Params,
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub values: Array3<f64>,
}

impl ImageEmbedding {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

impl Encoder {
    pub fn new(arch: EncoderArch, seed: u64) -> Self {
        let mut params = Params::new();
        let mut init = Initializer::new(seed);
        let mut in_ch = 3;
        let convs = arch
            .channels
            .iter()
            .zip(&arch.strides)
            .enumerate()
            .map(|(k, (&out, &stride))| {
                let c = Conv2d::register(&mut params, &mut init, &format!("enc{k}"), in_ch, out, 3, stride);
                in_ch = out;
                c
            })
            .collect();
        Self {
            arch,
            seed,
            params,
            convs,
        }
    }

    pub fn encode_image(&self, patch: &Patch) -> Result<ImageEmbedding> {
        let n = patch.size();
        if !n.is_multiple_of(self.arch.downsample()) {
            return Err(Error::Shape(format!(
                "patch side {n} is not divisible by the encoder stride {}",
                self.arch.downsample()
            )));
        }
        let mut h = patch.to_chw().mapv(|v| v - 0.5);
        for conv in &self.convs {
            h = relu(conv.forward(&self.params, &h).0);
        }
        Ok(ImageEmbedding { values: h })
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            kind: ENCODER_KIND.into(),
            architecture: serde_json::to_value(&self.arch).expect("serializable"),
            hyper: serde_json::Value::Null,
            meta: serde_json::json!({ "seed": self.seed, "frozen": true }),
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: &WeightsFile) -> Result<Self> {
        file.expect_kind(ENCODER_KIND)?;
        let arch: EncoderArch = serde_json::from_value(file.architecture.clone())?;
        let seed = file.meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("encoder seed missing".into()))?;
        let mut enc = Encoder::new(arch, seed);
        check_layout(&enc.params, &file.params)?;
        enc.params = file.params.clone();
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightsFile::load(path)?)
    }
}

fn check_layout(expected: &Params, found: &Params) -> Result<()> {
    let same = expected.names == found.names
        && expected
            .values
            .iter()
            .zip(&found.values)
            .all(|(a, b)| a.shape() == b.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Format("tensor layout does not match the architecture".into()))
    }
}

/// Sum of Gaussians (σ in embedding cells) at the prompt points, mapped
/// from patch to embedding coordinates and clipped at 1. Points are
/// rendered in sorted order so the result does not depend on input order.
pub fn render_prompt_heatmap(
    prompts: &PointPromptSet,
    h: usize,
    w: usize,
    scale: usize,
    sigma: f64,
) -> Array2<f64> {
    let mut points = prompts.points.clone();
    points.sort();
    let s = scale as f64;
    let centers: Vec<(f64, f64)> = points
        .iter()
        .map(|p| ((p.row as f64 + 0.5) / s - 0.5, (p.col as f64 + 0.5) / s - 0.5))
        .collect();
    let denom = 2.0 * sigma * sigma;
    Array2::from_shape_fn((h, w), |(i, j)| {
        centers
            .iter()
            .map(|(r, c)| (-((i as f64 - r).powi(2) + (j as f64 - c).powi(2)) / denom).exp())
            .sum::<f64>()
            .min(1.0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub embed_dim: usize,
    pub hidden: [usize; 3],
    pub upscale: usize,
    pub prompt_sigma: f64,
}

impl Default for DecoderArch {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: [48, 32, 16],
            upscale: 4,
            prompt_sigma: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl DecoderHyper {
    pub fn paper() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 4,
        }
    }
}

impl Default for DecoderHyper {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub arch: DecoderArch,
    pub hyper: DecoderHyper,
    pub init_seed: u64,
    pub epochs_trained: usize,
    pub params: Params,
    convs: [Conv2d; 4],
    quality: Linear,
}

pub type DecoderWeights = Decoder;

/// Fresh decoder parameters, reproducible per seed.
pub fn init_decoder(seed: u64) -> Decoder {
    Decoder::new(DecoderArch::default(), DecoderHyper::default(), seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMask {
    pub patch_id: String,
    pub logits: Array2<f64>,
    pub mask: BinaryMask,
    pub predicted_quality: f64,
}

struct DecoderTrace {
    caches: Vec<ConvCache>,
    acts: Vec<Array3<f64>>,
    pooled: Array1<f64>,
    logits: Array2<f64>,
    quality_logit: f64,
}

impl Decoder {
    pub fn new(arch: DecoderArch, hyper: DecoderHyper, seed: u64) -> Self {
        let mut params = Params::new();
        let mut init = Initializer::new(seed);
        let [h1, h2, h3] = arch.hidden;
        let convs = [
            Conv2d::register(&mut params, &mut init, "dec1", arch.embed_dim + 1, h1, 3, 1),
            Conv2d::register(&mut params, &mut init, "dec2", h1, h2, 3, 1),
            Conv2d::register(&mut params, &mut init, "dec3", h2, h3, 3, 1),
            Conv2d::register(&mut params, &mut init, "dec4", h3, 1, 3, 1),
        ];
        let quality = Linear::register(&mut params, &mut init, "quality", h2, 1);
        Self {
            arch,
            hyper,
            init_seed: seed,
            epochs_trained: 0,
            params,
            convs,
            quality,
        }
    }

    fn input(&self, embedding: &ImageEmbedding, prompts: &PointPromptSet) -> Result<Array3<f64>> {
        if prompts.points.is_empty() {
            return Err(Error::Prompt(format!(
                "patch {} has no point prompts",
                prompts.patch_id
            )));
        }
        let (d, h, w) = embedding.dim();
        if d != self.arch.embed_dim {
            return Err(Error::Shape(format!(
                "decoder expects {}-channel embeddings, got {d}",
                self.arch.embed_dim
            )));
        }
        let heat = render_prompt_heatmap(prompts, h, w, self.arch.upscale, self.arch.prompt_sigma);
        Ok(concatenate(
            Axis(0),
            &[embedding.values.view(), heat.view().insert_axis(Axis(0))],
        )
        .expect("matching spatial dims"))
    }

    fn forward(&self, params: &Params, x: &Array3<f64>) -> DecoderTrace {
        let mut caches = Vec::with_capacity(4);
        let mut acts = Vec::with_capacity(4);
        let (y, c) = self.convs[0].forward(params, x);
        caches.push(c);
        let a1 = relu(y);
        let (y, c) = self.convs[1].forward(params, &a1);
        caches.push(c);
        let a2 = relu(y);
        let pooled = global_avg_pool(&a2);
        let quality_logit = self.quality.forward(params, &pooled)[0];
        let (y, c) = self.convs[2].forward(params, &upsample2x(&a2));
        caches.push(c);
        let a3 = relu(y);
        let (y, c) = self.convs[3].forward(params, &upsample2x(&a3));
        caches.push(c);
        let logits = y.index_axis_move(Axis(0), 0);
        acts.extend([a1, a2, a3]);
        DecoderTrace {
            caches,
            acts,
            pooled,
            logits,
            quality_logit,
        }
    }

    /// Backward from logit and quality-logit gradients. The quality head
    /// does not send gradient into the shared trunk.
    fn backward(&self, params: &Params, trace: &DecoderTrace, dlogits: &Array2<f64>, dquality: f64, grads: &mut Params) {
        self.quality
            .backward(params, &trace.pooled, &Array1::from_elem(1, dquality), grads);
        let g = dlogits.view().insert_axis(Axis(0)).to_owned();
        let g = self.convs[3]
            .backward(params, &trace.caches[3], &g, grads, true)
            .expect("input grad");
        let g = relu_backward(&trace.acts[2], upsample2x_backward(&g));
        let g = self.convs[2]
            .backward(params, &trace.caches[2], &g, grads, true)
            .expect("input grad");
        let g = relu_backward(&trace.acts[1], upsample2x_backward(&g));
        let g = self.convs[1]
            .backward(params, &trace.caches[1], &g, grads, true)
            .expect("input grad");
        let g = relu_backward(&trace.acts[0], g);
        self.convs[0].backward(params, &trace.caches[0], &g, grads, false);
    }

    pub fn predict(&self, embedding: &ImageEmbedding, prompts: &PointPromptSet) -> Result<PredictedMask> {
        let x = self.input(embedding, prompts)?;
        let trace = self.forward(&self.params, &x);
        let (h, w) = trace.logits.dim();
        let mask = BinaryMask::from_fn(h, w, |i, j| trace.logits[[i, j]] > 0.0);
        Ok(PredictedMask {
            patch_id: prompts.patch_id.clone(),
            logits: trace.logits,
            mask,
            predicted_quality: sigmoid(trace.quality_logit),
        })
    }

    pub fn to_file(&self) -> WeightsFile {
        WeightsFile {
            kind: DECODER_KIND.into(),
            architecture: serde_json::to_value(&self.arch).expect("serializable"),
            hyper: serde_json::to_value(&self.hyper).expect("serializable"),
            meta: serde_json::json!({ "init_seed": self.init_seed, "epochs_trained": self.epochs_trained }),
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: &WeightsFile) -> Result<Self> {
        file.expect_kind(DECODER_KIND)?;
        let arch: DecoderArch = serde_json::from_value(file.architecture.clone())?;
        let hyper: DecoderHyper = serde_json::from_value(file.hyper.clone())?;
        let field = |name: &str| {
            file.meta[name]
                .as_u64()
                .ok_or_else(|| Error::Format(format!("decoder `{name}` missing")))
        };
        let mut dec = Decoder::new(arch, hyper, field("init_seed")?);
        dec.epochs_trained = field("epochs_trained")? as usize;
        check_layout(&dec.params, &file.params)?;
        dec.params = file.params.clone();
        Ok(dec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&WeightsFile::load(path)?)
    }
}

pub fn encode_image(patch: &Patch, encoder: &Encoder) -> Result<ImageEmbedding> {
    encoder.encode_image(patch)
}

pub fn predict_mask(
    embedding: &ImageEmbedding,
    prompts: &PointPromptSet,
    decoder: &Decoder,
) -> Result<PredictedMask> {
    decoder.predict(embedding, prompts)
}

/// Soft Dice loss plus soft IoU loss on `sigmoid(logits)`, each smoothed by
/// [`LOSS_EPS`]. Returns the loss and its gradient with respect to the logits.
pub fn seg_loss(logits: &Array2<f64>, target: &BinaryMask) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let probs = logits.mapv(sigmoid);
    let t = target.to_f64();
    let inter = (&probs * &t).sum();
    let total = probs.sum() + t.sum();
    let union = total - inter;
    let e = LOSS_EPS;
    let dice_den = total + e;
    let iou_den = union + e;
    let loss = (1.0 - (2.0 * inter + e) / dice_den) + (1.0 - (inter + e) / iou_den);
    let grad = ndarray::Zip::from(&probs).and(&t).map_collect(|&p, &tv| {
        let ddice = -(2.0 * tv * dice_den - (2.0 * inter + e)) / (dice_den * dice_den);
        let diou = -(tv * iou_den - (inter + e) * (1.0 - tv)) / (iou_den * iou_den);
        (ddice + diou) * p * (1.0 - p)
    });
    Ok((loss, grad))
}

/// One decoder training example with a precomputed frozen embedding.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub embedding: ImageEmbedding,
    pub target: BinaryMask,
    pub prompts: PointPromptSet,
}

pub fn hard_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        1.0
    } else {
        a.intersection_count(b) as f64 / union as f64
    }
}

/// AdamW fine-tuning of every decoder parameter; returns the final-epoch weights.
pub fn finetune_decoder(examples: &[TrainingExample], init: &Decoder, hyper: &DecoderHyper) -> Result<Decoder> {
    if examples.is_empty() {
        return Err(Error::Config("no decoder training pairs".into()));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::Config("decoder epochs and batch size must be positive".into()));
    }
    let inputs: Vec<Array3<f64>> = examples
        .iter()
        .map(|ex| init.input(&ex.embedding, &ex.prompts))
        .collect::<Result<_>>()?;
    for ex in examples {
        let (_, h, w) = ex.embedding.dim();
        if ex.target.dim() != (h * init.arch.upscale, w * init.arch.upscale) {
            return Err(Error::Shape(format!(
                "target {:?} does not match decoder output for {}",
                ex.target.dim(),
                ex.prompts.patch_id
            )));
        }
    }
    let mut dec = init.clone();
    dec.hyper = hyper.clone();
    let mut opt = Adam::new(&dec.params, hyper.lr, hyper.weight_decay, true);
    let mut rng = ChaCha8Rng::seed_from_u64(init.init_seed ^ 0xDEC0_DE55);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let mut grads = dec.params.zeros_like();
            for &i in batch {
                let trace = dec.forward(&dec.params, &inputs[i]);
                let (loss, dlogits) = seg_loss(&trace.logits, &examples[i].target)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        detail: "decoder loss is not finite".into(),
                    });
                }
                let (h, w) = trace.logits.dim();
                let hard = BinaryMask::from_fn(h, w, |r, c| trace.logits[[r, c]] > 0.0);
                let q = sigmoid(trace.quality_logit);
                let q_target = hard_iou(&hard, &examples[i].target);
                let dquality = 2.0 * (q - q_target) * q * (1.0 - q);
                dec.backward(&dec.params, &trace, &dlogits, dquality, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut dec.params, &grads, None);
        }
        if !dec.params.all_finite() {
            return Err(Error::Training {
                epoch,
                detail: "decoder parameters are not finite".into(),
            });
        }
        dec.epochs_trained = init.epochs_trained + epoch;
    }
    Ok(dec)
}

/// Mean soft loss over `examples`, used by descent checks.
pub fn mean_loss(dec: &Decoder, params: &Params, examples: &[TrainingExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let x = dec.input(&ex.embedding, &ex.prompts)?;
        total += seg_loss(&dec.forward(params, &x).logits, &ex.target)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Gradient of [`mean_loss`] with respect to the decoder parameters.
pub fn mean_loss_grads(dec: &Decoder, params: &Params, examples: &[TrainingExample]) -> Result<Params> {
    let mut grads = params.zeros_like();
    for ex in examples {
        let x = dec.input(&ex.embedding, &ex.prompts)?;
        let trace = dec.forward(params, &x);
        let (_, dlogits) = seg_loss(&trace.logits, &ex.target)?;
        dec.backward(params, &trace, &dlogits, 0.0, &mut grads);
    }
    grads.scale(1.0 / examples.len() as f64);
    Ok(grads)
}
