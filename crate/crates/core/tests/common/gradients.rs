use epsam_core::cam::{
    adl_apply, adl_backward, AdlBranch, AdlConfig, Classifier, ClassifierArch, ClassifierHyper,
};
use epsam_core::grid::PatchLabel;
use epsam_core::segmenter::seg_loss;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{map_from_seed, mask_from_seed, small_patch};
use super::{ensure, Check, NamedCheck};

pub const ALL: &[NamedCheck] = &[
    ("seg_loss_gradient", seg_loss_gradient),
    ("adl_layer_gradient", adl_layer_gradient),
    ("classifier_gradient", classifier_gradient),
];

pub const TOLERANCE: f64 = 1e-3;

/// Relative error with an absolute floor so two vanishing gradients agree.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn seg_loss_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, w) = (12, 12);
    let target = mask_from_seed(3, h, w, 0.4);
    let logits = map_from_seed(4, h, w, 0.0).mapv(|v| (v - 0.5) * 6.0);
    let (_, grad) = seg_loss(&logits, &target).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    for _ in 0..20 {
        let (i, j) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let mut plus = logits.clone();
        plus[[i, j]] += eps;
        let mut minus = logits.clone();
        minus[[i, j]] -= eps;
        let lp = seg_loss(&plus, &target).map_err(|e| e.to_string())?.0;
        let lm = seg_loss(&minus, &target).map_err(|e| e.to_string())?.0;
        let numeric = (lp - lm) / (2.0 * eps);
        let err = rel_error(grad[[i, j]], numeric);
        ensure(err <= TOLERANCE, || format!("({i}, {j}): analytic {} numeric {numeric} rel {err:e}", grad[[i, j]]))?;
    }
    Ok(())
}

/// Input gradient of the ADL layer alone under both stochastic branches.
pub fn adl_layer_gradient() -> Check {
    let cfg = AdlConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Array3::from_shape_fn((4, 5, 5), |_| rng.gen::<f64>() * 2.0 - 0.5);
    let r = Array3::from_shape_fn((4, 5, 5), |_| rng.gen::<f64>() - 0.5);
    let objective = |x: &Array3<f64>, branch| (adl_apply(x, &cfg, branch).0 * &r).sum();
    let eps = 1e-6;
    for branch in [AdlBranch::Importance, AdlBranch::Drop, AdlBranch::Identity] {
        let (_, cache) = adl_apply(&x, &cfg, branch);
        let analytic = adl_backward(&cache, &r);
        for _ in 0..10 {
            let idx = (rng.gen_range(0..4), rng.gen_range(0..5), rng.gen_range(0..5));
            let mut plus = x.clone();
            plus[idx] += eps;
            let mut minus = x.clone();
            minus[idx] -= eps;
            let numeric = (objective(&plus, branch) - objective(&minus, branch)) / (2.0 * eps);
            let err = rel_error(analytic[idx], numeric);
            ensure(err <= TOLERANCE, || format!("{branch:?} {idx:?}: analytic {} numeric {numeric}", analytic[idx]))?;
        }
    }
    Ok(())
}

/// Whole-classifier parameter gradients with both ADL layers active.
pub fn classifier_gradient() -> Check {
    let model = Classifier::new(ClassifierArch::default(), AdlConfig::default(), ClassifierHyper::desk(), 8);
    let (patch, _) = small_patch(12, PatchLabel::Positive);
    let x = model.input_for(&patch).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let eps = 1e-6;
    for branches in [[AdlBranch::Importance, AdlBranch::Importance], [AdlBranch::Drop, AdlBranch::Importance]] {
        let (_, grads) = model.loss_and_grads(&model.params, &x, 1.0, &branches);
        for _ in 0..10 {
            let t = rng.gen_range(0..model.params.len());
            let e = rng.gen_range(0..model.params.values[t].len());
            let mut p = model.params.clone();
            let base = p.flat_get(t, e);
            p.flat_set(t, e, base + eps);
            let lp = model.loss_and_grads(&p, &x, 1.0, &branches).0;
            p.flat_set(t, e, base - eps);
            let lm = model.loss_and_grads(&p, &x, 1.0, &branches).0;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.flat_get(t, e);
            let err = rel_error(analytic, numeric);
            ensure(err <= TOLERANCE, || {
                format!("{} [{e}] {branches:?}: analytic {analytic} numeric {numeric}", model.params.names[t])
            })?;
        }
    }
    Ok(())
}
