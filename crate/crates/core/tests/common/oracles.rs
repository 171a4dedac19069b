use epsam_core::cam::{adl_forward, high_pass_magnitude, AdlConfig};
use epsam_core::pepm::{entropy_map, sample_points};
use epsam_core::postproc::{morph_open, quantile_threshold};
use epsam_core::selftrain::ids;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{map_from_seed, mask_from_seed};
use super::{ensure, Check, NamedCheck};

pub const ALL: &[NamedCheck] = &[
    ("quantile_matches_sort_oracle", quantile_matches_sort_oracle),
    ("opening_matches_filter_oracle", opening_matches_filter_oracle),
    ("ids_matches_pixel_counts", ids_matches_pixel_counts),
    ("sampling_matches_multinomial", sampling_matches_multinomial),
    ("adl_drop_rate_frequency", adl_drop_rate_frequency),
    ("evp_matches_naive_dft", evp_matches_naive_dft),
];

/// Linear-interpolated quantile over the positive values, strict cut.
fn quantile_oracle(map: &Array2<f64>, q: f64) -> Vec<bool> {
    let mut v: Vec<f64> = map.iter().copied().filter(|&x| x > 0.0).collect();
    if v.is_empty() {
        return vec![false; map.len()];
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = if q == 0.0 {
        0.0
    } else {
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    map.iter().map(|&x| x > cut).collect()
}

pub fn quantile_matches_sort_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let zero = rng.gen_range(0.0..0.9);
        let mut map = map_from_seed(rng.gen(), h, w, zero);
        if case % 5 == 0 {
            // Ties: quantize to a handful of levels.
            map.mapv_inplace(|v| (v * 4.0).round() / 4.0);
        }
        let q = if case % 10 == 0 { 0.0 } else { rng.gen_range(0.0..=1.0) };
        let got: Vec<bool> = quantile_threshold(&map, q).view().iter().map(|&v| v == 1).collect();
        ensure(got == quantile_oracle(&map, q), || format!("case {case} (q = {q}) differs"))?;
    }
    Ok(())
}

/// Opening as a max filter of a min filter over the disk, outside pixels 0.
fn opening_oracle(m: &[Vec<bool>], r: i64) -> Vec<Vec<bool>> {
    let h = m.len() as i64;
    let w = m[0].len() as i64;
    let inside = |dy: i64, dx: i64| (dy * dy + dx * dx) as f64 <= (r as f64 + 0.5) * (r as f64 + 0.5);
    let at = |g: &[Vec<bool>], y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && g[y as usize][x as usize];
    let mut eroded = vec![vec![false; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut min = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    if inside(dy, dx) && !at(m, y + dy, x + dx) {
                        min = false;
                    }
                }
            }
            eroded[y as usize][x as usize] = min;
        }
    }
    let mut opened = vec![vec![false; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut max = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    if inside(dy, dx) && at(&eroded, y + dy, x + dx) {
                        max = true;
                    }
                }
            }
            opened[y as usize][x as usize] = max;
        }
    }
    opened
}

pub fn opening_matches_filter_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let m = mask_from_seed(rng.gen(), 16, 16, rng.gen_range(0.2..0.95));
        let r = rng.gen_range(0..4usize);
        let grid: Vec<Vec<bool>> = (0..16).map(|i| (0..16).map(|j| m.get(i, j)).collect()).collect();
        let expected = opening_oracle(&grid, r as i64);
        let got = morph_open(&m, r);
        for (i, row) in expected.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                ensure(got.get(i, j) == want, || format!("case {case} r {r} differs at ({i}, {j})"))?;
            }
        }
    }
    Ok(())
}

pub fn ids_matches_pixel_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let a = mask_from_seed(rng.gen(), h, w, rng.gen());
        let b = mask_from_seed(rng.gen(), h, w, rng.gen());
        let (mut inter, mut area) = (0usize, 0usize);
        for (x, y) in a.view().iter().zip(b.view().iter()) {
            area += (*y != 0) as usize;
            inter += (*x != 0 && *y != 0) as usize;
        }
        let expected = if area == 0 { 0.0 } else { inter as f64 / area as f64 };
        let got = ids(&a, &b).map_err(|e| e.to_string())?;
        ensure(got.value == expected && got.degenerate == (area == 0), || format!("case {case}: {got:?} vs {expected}"))?;
    }
    Ok(())
}

pub fn sampling_matches_multinomial() -> Check {
    let weights = ndarray::array![[0.05, 0.1, 0.0], [0.2, 0.25, 0.4]];
    let e = entropy_map(&weights).map_err(|e| e.to_string())?;
    let mut counts = Array2::<f64>::zeros(weights.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draws = 10_000;
    for _ in 0..draws {
        let set = sample_points(&e, 1, &mut rng, "p").map_err(|e| e.to_string())?;
        counts[[set.points[0].row, set.points[0].col]] += 1.0;
    }
    for ((i, j), c) in counts.indexed_iter() {
        let freq = c / draws as f64;
        ensure((freq - e.values[[i, j]]).abs() <= 0.02, || {
            format!("cell ({i}, {j}): frequency {freq:.4} vs probability {:.4}", e.values[[i, j]])
        })?;
    }
    Ok(())
}

pub fn adl_drop_rate_frequency() -> Check {
    let cfg = AdlConfig::default();
    let f = Array3::from_shape_fn((2, 4, 4), |(c, i, j)| (c + i * 4 + j) as f64 / 10.0);
    let drop = adl_forward(&f, &AdlConfig { drop_rate: 1.0, ..cfg.clone() }, &mut ChaCha8Rng::seed_from_u64(0), true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    let hits = (0..trials).filter(|_| adl_forward(&f, &cfg, &mut rng, true) == drop).count();
    let freq = hits as f64 / trials as f64;
    ensure((freq - cfg.drop_rate).abs() <= 0.02, || format!("drop frequency {freq:.4}"))
}

/// Direct O(N⁴) DFT filter, the reference for the FFT path.
fn naive_high_pass(plane: &Array2<f64>, ratio: f64) -> Array2<f64> {
    use std::f64::consts::PI;
    let n = plane.dim().0;
    let half = (ratio * n as f64 / 2.0).floor() as i64;
    let signed = |k: usize| if k < n.div_ceil(2) { k as i64 } else { k as i64 - n as i64 };
    let mut re = Array2::<f64>::zeros((n, n));
    let mut im = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            if signed(u).abs() <= half && signed(v).abs() <= half {
                continue;
            }
            for ((y, x), &p) in plane.indexed_iter() {
                let a = -2.0 * PI * ((u * y) as f64 + (v * x) as f64) / n as f64;
                re[[u, v]] += p * a.cos();
                im[[u, v]] += p * a.sin();
            }
        }
    }
    Array2::from_shape_fn((n, n), |(y, x)| {
        let (mut sr, mut si) = (0.0, 0.0);
        for u in 0..n {
            for v in 0..n {
                let a = 2.0 * PI * ((u * y) as f64 + (v * x) as f64) / n as f64;
                sr += re[[u, v]] * a.cos() - im[[u, v]] * a.sin();
                si += re[[u, v]] * a.sin() + im[[u, v]] * a.cos();
            }
        }
        (sr * sr + si * si).sqrt() / (n * n) as f64
    })
}

pub fn evp_matches_naive_dft() -> Check {
    let n = 16;
    let mut impulse = Array2::<f64>::zeros((n, n));
    impulse[[8, 8]] = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
    for (plane, ratio) in [(impulse.clone(), 0.25), (noise.clone(), 0.25), (noise, 0.5)] {
        let fast = high_pass_magnitude(&plane, ratio);
        let slow = naive_high_pass(&plane, ratio);
        for (a, b) in fast.iter().zip(slow.iter()) {
            ensure((a - b).abs() <= 1e-9, || format!("fft {a} vs dft {b}"))?;
        }
    }
    let hp = high_pass_magnitude(&impulse, 0.25);
    let mut best = (0, 0);
    for ((i, j), v) in hp.indexed_iter() {
        if *v > hp[best] {
            best = (i, j);
        }
    }
    ensure(best == (8, 8), || format!("impulse response peaks at {best:?}"))
}

