use epsam_core::grid::{BinaryMask, Patch, PatchLabel};
use epsam_core::pepm::{entropy_map, sample_points, PointPromptSet};
use epsam_core::segmenter::{Encoder, EncoderArch, ImageEmbedding};
use epsam_core::syndata::{generate_patch, GeneratorParams, GroundTruthMask};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mask_from_seed(seed: u64, h: usize, w: usize, density: f64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BinaryMask::from_fn(h, w, |_, _| rng.gen::<f64>() < density)
}

/// Random non-negative map with roughly `zero_frac` exact zeros.
pub fn map_from_seed(seed: u64, h: usize, w: usize, zero_frac: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| {
        if rng.gen::<f64>() < zero_frac {
            0.0
        } else {
            rng.gen::<f64>()
        }
    })
}

pub fn small_params() -> GeneratorParams {
    GeneratorParams {
        size: 32,
        ..GeneratorParams::default()
    }
}

pub fn patch(seed: u64, label: PatchLabel) -> (Patch, GroundTruthMask) {
    generate_patch(seed, label, &GeneratorParams::default()).expect("generator")
}

pub fn small_patch(seed: u64, label: PatchLabel) -> (Patch, GroundTruthMask) {
    generate_patch(seed, label, &small_params()).expect("generator")
}

pub fn encoder() -> Encoder {
    Encoder::new(EncoderArch::default(), 7)
}

/// Prompts drawn from a mask treated as a flat activation map.
pub fn prompts_from_mask(mask: &BinaryMask, k: usize, seed: u64, id: &str) -> PointPromptSet {
    let e = entropy_map(&mask.to_f64()).expect("non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_points(&e, k, &mut rng, id).expect("mask has support")
}

/// Embedding, ground truth and prompts of one positive patch.
pub fn example(seed: u64, enc: &Encoder) -> (ImageEmbedding, BinaryMask, PointPromptSet) {
    let (p, gt) = patch(seed, PatchLabel::Positive);
    let prompts = prompts_from_mask(&gt.mask, 20, seed, &p.id);
    (enc.encode_image(&p).expect("encode"), gt.mask, prompts)
}
