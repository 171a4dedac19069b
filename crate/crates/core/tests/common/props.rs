use std::collections::BTreeSet;

use epsam_core::cam::{
    adl_forward, attention_map, cam_for_patch, drop_mask, extract_evp, importance_map, AdlConfig, Classifier,
    ClassifierArch, ClassifierHyper,
};
use epsam_core::eval::{dice, iou};
use epsam_core::grid::{BinaryMask, Patch, PatchLabel};
use epsam_core::nn::sigmoid;
use epsam_core::pepm::{entropy_map, sample_points};
use epsam_core::postproc::{morph_open, quantile_threshold, rotate_fuse, InitialMask};
use epsam_core::segmenter::{
    finetune_decoder, init_decoder, mean_loss, mean_loss_grads, seg_loss, DecoderHyper, TrainingExample,
};
use epsam_core::selftrain::{ids, iterate, RetrainConfig, RetrainInput};
use epsam_core::syndata::{build_dataset, generate_patch, plan_dataset, DatasetParams, Split};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fixtures::*;
use super::{ensure, run_prop, Check, NamedCheck};

pub const ALL: &[NamedCheck] = &[
    ("synth_regeneration_is_bit_identical", synth_regeneration_is_bit_identical),
    ("synth_positive_fraction_in_range", synth_positive_fraction_in_range),
    ("synth_splits_disjoint_and_balanced", synth_splits_disjoint_and_balanced),
    ("adl_drop_mask_exact", adl_drop_mask_exact),
    ("adl_importance_is_sigmoid", adl_importance_is_sigmoid),
    ("adl_inference_identity", adl_inference_identity),
    ("evp_constant_patch_is_zero", evp_constant_patch_is_zero),
    ("evp_shape_and_determinism", evp_shape_and_determinism),
    ("cam_invariant_to_head_scaling", cam_invariant_to_head_scaling),
    ("cam_range", cam_range),
    ("classifier_weights_round_trip", classifier_weights_round_trip),
    ("opening_idempotent", opening_idempotent),
    ("opening_anti_extensive", opening_anti_extensive),
    ("quantile_monotone_in_q", quantile_monotone_in_q),
    ("rotate_fuse_scale_invariant", rotate_fuse_scale_invariant),
    ("postproc_outputs_binary_same_shape", postproc_outputs_binary_same_shape),
    ("entropy_sums_to_one", entropy_sums_to_one),
    ("entropy_scale_invariant", entropy_scale_invariant),
    ("sampling_distinct_supported_inside", sampling_distinct_supported_inside),
    ("sampling_seed_fixes_output", sampling_seed_fixes_output),
    ("encoder_frozen_during_finetune", encoder_frozen_during_finetune),
    ("dice_iou_identity", dice_iou_identity),
    ("prediction_permutation_invariant", prediction_permutation_invariant),
    ("prediction_mask_matches_logits", prediction_mask_matches_logits),
    ("decoder_init_reproducible", decoder_init_reproducible),
    ("seg_loss_bounded", seg_loss_bounded),
    ("seg_loss_descent", seg_loss_descent),
    ("ids_range_and_subset", ids_range_and_subset),
    ("ids_transpose_invariant", ids_transpose_invariant),
    ("selftrain_loop_contracts", selftrain_loop_contracts),
];

fn files_equal(a: &std::path::Path, b: &std::path::Path) -> Result<(), String> {
    let mut names: Vec<_> = walk(a);
    names.sort();
    let mut other: Vec<_> = walk(b);
    other.sort();
    let strip = |v: &[std::path::PathBuf], root: &std::path::Path| -> Vec<std::path::PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    ensure(strip(&names, a) == strip(&other, b), || "file lists differ".into())?;
    for (x, y) in names.iter().zip(&other) {
        ensure(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), || {
            format!("{} differs", x.display())
        })?;
    }
    Ok(())
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

pub fn synth_regeneration_is_bit_identical() -> Check {
    let params = DatasetParams {
        train: 4,
        valid: 2,
        test: 2,
        slides: 4,
        generator: small_params(),
    };
    for seed in [0u64, 11, 12345] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&params, seed, a.path()).map_err(|e| e.to_string())?;
        build_dataset(&params, seed, b.path()).map_err(|e| e.to_string())?;
        files_equal(a.path(), b.path())?;
    }
    run_prop(16, any::<u64>(), |seed| {
        let x = generate_patch(seed, PatchLabel::Positive, &small_params()).unwrap();
        let y = generate_patch(seed, PatchLabel::Positive, &small_params()).unwrap();
        prop_assert_eq!(x.0.pixels, y.0.pixels);
        prop_assert_eq!(x.1.mask, y.1.mask);
        Ok(())
    })
}

pub fn synth_positive_fraction_in_range() -> Check {
    run_prop(48, any::<u64>(), |seed| {
        let (_, gt) = generate_patch(seed, PatchLabel::Positive, &Default::default()).unwrap();
        let f = gt.mask.fraction();
        prop_assert!((0.20..=0.90).contains(&f), "fraction {}", f);
        Ok(())
    })
}

pub fn synth_splits_disjoint_and_balanced() -> Check {
    let strat = (any::<u64>(), 1usize..6, 1usize..4, 1usize..4, 0usize..4);
    run_prop(128, strat, |(seed, tr, va, te, extra)| {
        let params = DatasetParams {
            train: 2 * tr,
            valid: 2 * va,
            test: 2 * te,
            slides: 3 + extra,
            generator: Default::default(),
        };
        let m = plan_dataset(&params, seed).unwrap();
        let slides = |s: Split| m.split(s).map(|e| e.slide_id.clone()).collect::<BTreeSet<_>>();
        for (a, b) in [(Split::Train, Split::Valid), (Split::Train, Split::Test), (Split::Valid, Split::Test)] {
            prop_assert!(slides(a).is_disjoint(&slides(b)));
        }
        for s in [Split::Train, Split::Valid, Split::Test] {
            let pos = m.split(s).filter(|e| e.label.is_positive()).count();
            let neg = m.split(s).count() - pos;
            prop_assert_eq!(pos, neg);
        }
        Ok(())
    })
}

fn features_from(seed: u64, c: usize, h: usize) -> Array3<f64> {
    let m = map_from_seed(seed, c * h, h, 0.1);
    Array3::from_shape_fn((c, h, h), |(k, i, j)| m[[k * h + i, j]] * 3.0 - 0.5)
}

pub fn adl_drop_mask_exact() -> Check {
    run_prop(200, (any::<u64>(), 0.05f64..1.0), |(seed, ratio)| {
        let att = attention_map(&features_from(seed, 3, 8));
        let max = att.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let drop = drop_mask(&att, ratio);
        for (a, d) in att.iter().zip(drop.iter()) {
            prop_assert_eq!(*d, if *a <= ratio * max { 1.0 } else { 0.0 });
        }
        Ok(())
    })
}

pub fn adl_importance_is_sigmoid() -> Check {
    run_prop(200, any::<u64>(), |seed| {
        let att = attention_map(&features_from(seed, 4, 6));
        for (a, v) in att.iter().zip(importance_map(&att).iter()) {
            prop_assert!((v - sigmoid(*a)).abs() <= 1e-6);
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
        Ok(())
    })
}

pub fn adl_inference_identity() -> Check {
    run_prop(100, any::<u64>(), |seed| {
        let f = features_from(seed, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(adl_forward(&f, &AdlConfig::default(), &mut rng, false), f);
        Ok(())
    })
}

pub fn evp_constant_patch_is_zero() -> Check {
    run_prop(32, (0.0f64..=1.0, prop::sample::select(vec![8usize, 16, 32])), |(v, n)| {
        let p = Patch::new("c", "s", Array3::from_elem((n, n, 3), v), PatchLabel::Negative).unwrap();
        prop_assert!(extract_evp(&p, 0.25).unwrap().iter().all(|&x| x == 0.0));
        Ok(())
    })
}

pub fn evp_shape_and_determinism() -> Check {
    run_prop(16, (any::<u64>(), 0.05f64..0.95), |(seed, ratio)| {
        let (p, _) = generate_patch(seed, PatchLabel::Positive, &small_params()).unwrap();
        let a = extract_evp(&p, ratio).unwrap();
        prop_assert_eq!(a.dim(), (p.size(), p.size()));
        prop_assert_eq!(a, extract_evp(&p, ratio).unwrap());
        Ok(())
    })
}

fn classifier(seed: u64) -> Classifier {
    Classifier::new(ClassifierArch::default(), AdlConfig::default(), ClassifierHyper::desk(), seed)
}

fn argmax(a: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    for ((i, j), v) in a.indexed_iter() {
        if *v > a[best] {
            best = (i, j);
        }
    }
    best
}

pub fn cam_invariant_to_head_scaling() -> Check {
    run_prop(12, (any::<u64>(), 0.01f64..100.0), |(seed, c)| {
        let model = classifier(seed);
        let (p, _) = patch(seed, PatchLabel::Positive);
        let base = cam_for_patch(&model, &p).unwrap().values;
        let mut scaled = model.clone();
        let idx = scaled.head_weight_index();
        scaled.params.values[idx].mapv_inplace(|w| w * c);
        let other = cam_for_patch(&scaled, &p).unwrap().values;
        prop_assert_eq!(argmax(&base), argmax(&other));
        for (a, b) in base.iter().zip(other.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        Ok(())
    })
}

pub fn cam_range() -> Check {
    run_prop(12, any::<u64>(), |seed| {
        let model = classifier(seed);
        let (p, _) = patch(seed ^ 1, PatchLabel::Positive);
        let cam = cam_for_patch(&model, &p).unwrap().values;
        prop_assert_eq!(cam.dim(), (64, 64));
        let (lo, hi) = cam.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        if hi > 0.0 {
            prop_assert!(lo == 0.0 && (hi - 1.0).abs() < 1e-12, "range {} {}", lo, hi);
        } else {
            prop_assert!(cam.iter().all(|&v| v == 0.0));
        }
        Ok(())
    })
}

pub fn classifier_weights_round_trip() -> Check {
    let model = classifier(5);
    let bytes = model.to_file().to_bytes().map_err(|e| e.to_string())?;
    let back = Classifier::from_file(&epsam_core::weights::WeightsFile::from_bytes(&bytes).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(back.params == model.params && back.arch == model.arch, || "round trip changed weights".into())
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (any::<u64>(), 1usize..24, 1usize..24, 0.0f64..1.0).prop_map(|(s, h, w, d)| mask_from_seed(s, h, w, d))
}

pub fn opening_idempotent() -> Check {
    run_prop(300, (mask_strategy(), 0usize..4), |(m, r)| {
        let once = morph_open(&m, r);
        prop_assert_eq!(morph_open(&once, r), once);
        Ok(())
    })
}

pub fn opening_anti_extensive() -> Check {
    run_prop(300, (mask_strategy(), 0usize..4), |(m, r)| {
        prop_assert!(morph_open(&m, r).is_subset_of(&m));
        Ok(())
    })
}

pub fn quantile_monotone_in_q() -> Check {
    let strat = (any::<u64>(), 1usize..20, 1usize..20, 0.0f64..0.9, 0.0f64..=1.0, 0.0f64..=1.0);
    run_prop(300, strat, |(s, h, w, z, q1, q2)| {
        let map = map_from_seed(s, h, w, z);
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(quantile_threshold(&map, hi).is_subset_of(&quantile_threshold(&map, lo)));
        Ok(())
    })
}

pub fn rotate_fuse_scale_invariant() -> Check {
    run_prop(40, (any::<u64>(), 0.01f64..50.0), |(seed, c)| {
        let (p, _) = small_patch(seed, PatchLabel::Positive);
        // Any orientation-dependent producer will do; use a channel mix.
        let producer = |scale: f64| {
            move |q: &Patch| {
                let v = q.pixels.map_axis(ndarray::Axis(2), |px| (px[0] - 0.5 * px[2]).max(0.0) * scale);
                Ok(epsam_core::cam::EnhancedCam { patch_id: q.id.clone(), values: v })
            }
        };
        let a = rotate_fuse(producer(1.0), &p).unwrap().values;
        let b = rotate_fuse(producer(c), &p).unwrap().values;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        Ok(())
    })
}

pub fn postproc_outputs_binary_same_shape() -> Check {
    let strat = (any::<u64>(), 1usize..20, 1usize..20, 0.0f64..0.9, 0.0f64..=1.0, 0usize..3);
    run_prop(200, strat, |(s, h, w, z, q, r)| {
        let map = map_from_seed(s, h, w, z);
        for m in [quantile_threshold(&map, q), morph_open(&quantile_threshold(&map, q), r)] {
            prop_assert_eq!(m.dim(), (h, w));
            prop_assert!(m.view().iter().all(|&v| v <= 1));
        }
        Ok(())
    })
}

pub fn entropy_sums_to_one() -> Check {
    run_prop(300, (any::<u64>(), 1usize..30, 1usize..30, 0.0f64..0.95), |(s, h, w, z)| {
        let mut map = map_from_seed(s, h, w, z);
        map[[0, 0]] += 0.1;
        let e = entropy_map(&map).unwrap();
        prop_assert!(!e.degenerate);
        prop_assert!((e.values.sum() - 1.0).abs() <= 1e-6);
        Ok(())
    })
}

pub fn entropy_scale_invariant() -> Check {
    run_prop(300, (any::<u64>(), 1usize..20, 1usize..20, 1e-3f64..1e3), |(s, h, w, c)| {
        let mut map = map_from_seed(s, h, w, 0.3);
        map[[0, 0]] += 0.1;
        let a = entropy_map(&map).unwrap().values;
        let b = entropy_map(&map.mapv(|v| v * c)).unwrap().values;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn sampling_distinct_supported_inside() -> Check {
    let strat = (any::<u64>(), 1usize..16, 1usize..16, 0.0f64..0.95, 1usize..80);
    run_prop(300, strat, |(s, h, w, z, k)| {
        let mut map = map_from_seed(s, h, w, z);
        map[[h - 1, w - 1]] += 0.5;
        let e = entropy_map(&map).unwrap();
        let support = e.values.iter().filter(|&&v| v > 0.0).count();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let set = sample_points(&e, k, &mut rng, "p").unwrap();
        prop_assert_eq!(set.count(), k.min(support));
        let distinct: BTreeSet<_> = set.points.iter().collect();
        prop_assert_eq!(distinct.len(), set.count());
        for p in &set.points {
            prop_assert!(p.row < h && p.col < w);
            prop_assert!(e.values[[p.row, p.col]] > 0.0);
        }
        Ok(())
    })
}

pub fn sampling_seed_fixes_output() -> Check {
    run_prop(200, (any::<u64>(), 1usize..60), |(s, k)| {
        let e = entropy_map(&map_from_seed(s, 12, 12, 0.2)).unwrap();
        if e.degenerate {
            return Ok(());
        }
        let draw = || sample_points(&e, k, &mut ChaCha8Rng::seed_from_u64(s), "p").unwrap();
        prop_assert_eq!(draw(), draw());
        Ok(())
    })
}

pub fn encoder_frozen_during_finetune() -> Check {
    let enc = encoder();
    let before = enc.to_file().to_bytes().map_err(|e| e.to_string())?;
    let examples: Vec<TrainingExample> = (0..3)
        .map(|s| {
            let (embedding, target, prompts) = example(s, &enc);
            TrainingExample { embedding, target, prompts }
        })
        .collect();
    let hyper = DecoderHyper { epochs: 2, ..DecoderHyper::desk() };
    finetune_decoder(&examples, &init_decoder(1), &hyper).map_err(|e| e.to_string())?;
    let after = enc.to_file().to_bytes().map_err(|e| e.to_string())?;
    ensure(before == after, || "encoder bytes changed".into())
}

pub fn dice_iou_identity() -> Check {
    run_prop(500, (any::<u64>(), 1usize..16, 1usize..16, 0.0f64..1.0, 0.0f64..1.0), |(s, h, w, d1, d2)| {
        let a = mask_from_seed(s, h, w, d1);
        let b = mask_from_seed(s.wrapping_add(1), h, w, d2);
        let dc = dice(&a, &b);
        prop_assert!((iou(&a, &b) - dc / (2.0 - dc)).abs() <= 1e-9);
        Ok(())
    })
}

pub fn prediction_permutation_invariant() -> Check {
    let enc = encoder();
    let dec = init_decoder(3);
    let cases: Vec<_> = (0..3).map(|s| example(s, &enc)).collect();
    run_prop(24, (0usize..3, any::<u64>()), |(i, s)| {
        let (emb, _, prompts) = &cases[i];
        let mut shuffled = prompts.clone();
        use rand::seq::SliceRandom;
        shuffled.points.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        prop_assert_eq!(dec.predict(emb, prompts).unwrap(), dec.predict(emb, &shuffled).unwrap());
        Ok(())
    })
}

pub fn prediction_mask_matches_logits() -> Check {
    let enc = encoder();
    for s in 0..3 {
        let (emb, gt, prompts) = example(s, &enc);
        let pred = init_decoder(s).predict(&emb, &prompts).map_err(|e| e.to_string())?;
        ensure(pred.mask.dim() == gt.dim() && pred.logits.dim() == gt.dim(), || "shape".into())?;
        let expected = BinaryMask::from_fn(64, 64, |i, j| pred.logits[[i, j]] > 0.0);
        ensure(pred.mask == expected, || "mask != 1[logits > 0]".into())?;
    }
    Ok(())
}

pub fn decoder_init_reproducible() -> Check {
    run_prop(20, any::<u64>(), |s| {
        prop_assert_eq!(init_decoder(s).params, init_decoder(s).params);
        Ok(())
    })
}

pub fn seg_loss_bounded() -> Check {
    run_prop(300, (any::<u64>(), 1usize..16, 1usize..16, 0.0f64..1.0, 0.1f64..40.0), |(s, h, w, d, amp)| {
        let target = mask_from_seed(s, h, w, d);
        let logits = map_from_seed(s ^ 7, h, w, 0.0).mapv(|v| (v - 0.5) * amp);
        let (loss, grad) = seg_loss(&logits, &target).unwrap();
        // Dice term in [0, 1], IoU term in [0, 1]; the smoothing keeps both there.
        prop_assert!((0.0..=2.0 + 1e-12).contains(&loss), "loss {}", loss);
        prop_assert!(grad.iter().all(|g| g.is_finite()));
        Ok(())
    })
}

pub fn seg_loss_descent() -> Check {
    let enc = encoder();
    let examples: Vec<TrainingExample> = (0..2)
        .map(|s| {
            let (embedding, target, prompts) = example(s, &enc);
            TrainingExample { embedding, target, prompts }
        })
        .collect();
    let dec = init_decoder(9);
    let before = mean_loss(&dec, &dec.params, &examples).map_err(|e| e.to_string())?;
    let grads = mean_loss_grads(&dec, &dec.params, &examples).map_err(|e| e.to_string())?;
    let mut params = dec.params.clone();
    let norm2: f64 = grads.values.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let step = 1e-3 / norm2.sqrt().max(1e-12);
    for (p, g) in params.values.iter_mut().zip(&grads.values) {
        p.scaled_add(-step, g);
    }
    let after = mean_loss(&dec, &params, &examples).map_err(|e| e.to_string())?;
    ensure(after < before, || format!("loss rose from {before} to {after}"))
}

pub fn ids_range_and_subset() -> Check {
    run_prop(1000, (any::<u64>(), 1usize..12, 1usize..12, 0.0f64..1.0, 0.0f64..1.0), |(s, h, w, d1, d2)| {
        let a = mask_from_seed(s, h, w, d1);
        let b = mask_from_seed(s.wrapping_add(3), h, w, d2);
        let score = ids(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&score.value));
        let subset = b.count() > 0 && b.is_subset_of(&a);
        prop_assert_eq!(score.value == 1.0, subset);
        Ok(())
    })
}

pub fn ids_transpose_invariant() -> Check {
    run_prop(500, (any::<u64>(), 1usize..12, 1usize..12, 0.0f64..1.0, 0.0f64..1.0), |(s, h, w, d1, d2)| {
        let a = mask_from_seed(s, h, w, d1);
        let b = mask_from_seed(s.wrapping_add(3), h, w, d2);
        prop_assert_eq!(ids(&a, &b).unwrap(), ids(&a.transposed(), &b.transposed()).unwrap());
        Ok(())
    })
}

/// Stored masks passed the gate, the pseudo-label id set only grows, and
/// every iteration's decoder is reproducible from `init_decoder(seed_n)`.
pub fn selftrain_loop_contracts() -> Check {
    let enc = encoder();
    let inputs: Vec<RetrainInput> = (0..6)
        .map(|s| {
            let (embedding, gt, prompts) = example(s, &enc);
            RetrainInput {
                embedding,
                initial: InitialMask { patch_id: prompts.patch_id.clone(), mask: gt.clone() },
                prompts,
                ground_truth: Some(gt),
            }
        })
        .collect();
    let hyper = DecoderHyper { epochs: 4, ..DecoderHyper::desk() };
    let pre_examples: Vec<TrainingExample> = inputs
        .iter()
        .map(|i| TrainingExample {
            embedding: i.embedding.clone(),
            target: i.initial.mask.clone(),
            prompts: i.prompts.clone(),
        })
        .collect();
    let preliminary = finetune_decoder(&pre_examples, &init_decoder(100), &hyper).map_err(|e| e.to_string())?;
    let cfg = RetrainConfig { threshold: 0.5, iterations: 3, base_seed: 40, seeds: None };
    let out = iterate(&inputs, &preliminary, &cfg, &hyper).map_err(|e| e.to_string())?;
    ensure(out.metrics.len() == 4, || "expected 4 metric rows".into())?;

    let mut previous: BTreeSet<String> = BTreeSet::new();
    for it in &out.iterations {
        let ids_now: BTreeSet<String> = it.pseudo_labels.records.keys().cloned().collect();
        ensure(previous.is_subset(&ids_now), || format!("iteration {} dropped a patch", it.iteration))?;
        previous = ids_now;
        for (id, label) in &it.pseudo_labels.records {
            let initial = &inputs.iter().find(|i| &i.prompts.patch_id == id).unwrap().initial.mask;
            let rechecked = ids(initial, &label.mask).map_err(|e| e.to_string())?;
            ensure(rechecked.value > cfg.threshold, || format!("{id} stored with ids {}", rechecked.value))?;
        }
        let examples: Vec<TrainingExample> = it
            .pseudo_labels
            .records
            .iter()
            .map(|(id, label)| {
                let inp = inputs.iter().find(|i| &i.prompts.patch_id == id).unwrap();
                TrainingExample {
                    embedding: inp.embedding.clone(),
                    target: label.mask.clone(),
                    prompts: inp.prompts.clone(),
                }
            })
            .collect();
        let replay = finetune_decoder(&examples, &init_decoder(cfg.seed_for(it.iteration)), &hyper)
            .map_err(|e| e.to_string())?;
        ensure(replay.params == it.decoder.params, || {
            format!("iteration {} decoder not reproducible from its seed", it.iteration)
        })?;
    }
    Ok(())
}
