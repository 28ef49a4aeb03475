//! Reference tables and brute-force oracles shared by the integration tests.
//! Nothing here calls into the code under test except to build inputs.

#![allow(dead_code)]

pub mod gradcheck;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use railpatch::evalkit::GridSpec;
use railpatch::forge::ObstacleAnnotation;
use railpatch::localize::{ClassificationMap, ScoreSource};

/// Output sizes of a published layer table as `(first, last, h, w, c)` runs
/// at 224x224 input, layer 0 being the input.
pub type SizeRuns = &'static [(usize, usize, usize, usize, usize)];

pub const SIZES_GENERATOR_G: SizeRuns = &[
    (0, 0, 224, 224, 3),
    (1, 2, 224, 224, 32),
    (3, 5, 112, 112, 32),
    (6, 8, 56, 56, 64),
    (9, 11, 28, 28, 64),
    (12, 14, 14, 14, 128),
    (15, 15, 7, 7, 256),
    (16, 16, 7, 7, 128),
    (17, 17, 7, 7, 64),
    (18, 19, 7, 7, 32),
    (20, 20, 7, 7, 8),
    (21, 21, 7, 7, 16),
    (22, 22, 7, 7, 32),
    (23, 23, 7, 7, 64),
    (24, 24, 7, 7, 128),
    (25, 25, 7, 7, 256),
    (26, 28, 14, 14, 128),
    (29, 31, 28, 28, 64),
    (32, 34, 56, 56, 64),
    (35, 37, 112, 112, 32),
    (38, 39, 224, 224, 32),
    (40, 40, 224, 224, 3),
];

pub const SIZES_DISCRIMINATOR_D: SizeRuns = &[
    (0, 0, 224, 224, 4),
    (1, 1, 112, 112, 64),
    (2, 2, 56, 56, 128),
    (3, 3, 28, 28, 256),
    (4, 4, 14, 14, 512),
    (5, 5, 1, 1, 1),
];

pub const SIZES_PATCHCLASS13: SizeRuns =
    &[(0, 0, 224, 224, 3), (1, 2, 224, 224, 32), (3, 3, 112, 112, 32), (4, 6, 224, 224, 32), (7, 7, 224, 224, 2)];

pub const SIZES_PATCHCLASS21: SizeRuns = &[
    (0, 0, 224, 224, 3),
    (1, 2, 224, 224, 32),
    (3, 3, 112, 112, 32),
    (4, 4, 112, 112, 64),
    (5, 5, 112, 112, 32),
    (6, 8, 224, 224, 32),
    (9, 9, 224, 224, 2),
];

pub const SIZES_PATCHCLASS29: SizeRuns = &[
    (0, 0, 224, 224, 3),
    (1, 2, 224, 224, 32),
    (3, 3, 112, 112, 32),
    (4, 6, 112, 112, 64),
    (7, 7, 112, 112, 32),
    (8, 10, 224, 224, 32),
    (11, 11, 224, 224, 2),
];

pub const SIZES_PATCHCLASS35: SizeRuns = &[
    (0, 0, 224, 224, 3),
    (1, 2, 224, 224, 32),
    (3, 3, 112, 112, 32),
    (4, 5, 112, 112, 64),
    (6, 6, 56, 56, 64),
    (7, 8, 112, 112, 64),
    (9, 9, 112, 112, 32),
    (10, 12, 224, 224, 32),
    (13, 13, 224, 224, 2),
];

pub const SIZES_PATCHCLASS51: SizeRuns = &[
    (0, 0, 224, 224, 3),
    (1, 2, 224, 224, 32),
    (3, 3, 112, 112, 32),
    (4, 5, 112, 112, 64),
    (6, 6, 56, 56, 64),
    (7, 7, 56, 56, 128),
    (8, 8, 56, 56, 64),
    (9, 10, 112, 112, 64),
    (11, 11, 112, 112, 32),
    (12, 14, 224, 224, 32),
    (15, 15, 224, 224, 2),
];

/// Every size table, keyed by builtin name.
pub const SIZE_TABLES: [(&str, SizeRuns); 7] = [
    ("generator_g", SIZES_GENERATOR_G),
    ("discriminator_d", SIZES_DISCRIMINATOR_D),
    ("patchclass13", SIZES_PATCHCLASS13),
    ("patchclass21", SIZES_PATCHCLASS21),
    ("patchclass29", SIZES_PATCHCLASS29),
    ("patchclass35", SIZES_PATCHCLASS35),
    ("patchclass51", SIZES_PATCHCLASS51),
];

/// Expands runs into one `(h, w, c)` per layer.
pub fn expand(runs: SizeRuns) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &(first, last, h, w, c) in runs {
        assert_eq!(first, out.len(), "runs must be contiguous");
        for _ in first..=last {
            out.push((h, w, c));
        }
    }
    out
}

/// Published per-layer receptive fields, layers 1.. of each patch classifier.
pub const RF_PATCHCLASS13: &[usize] = &[3, 5, 7, 9, 11, 13, 13];
pub const RF_PATCHCLASS21: &[usize] = &[3, 5, 7, 11, 15, 17, 19, 21, 21];
pub const RF_PATCHCLASS29: &[usize] = &[3, 5, 7, 11, 15, 19, 23, 25, 27, 29, 29];
pub const RF_PATCHCLASS35: &[usize] = &[3, 5, 7, 11, 15, 19, 23, 27, 31, 31, 35, 35, 35];
pub const RF_PATCHCLASS51: &[usize] = &[3, 5, 7, 11, 15, 19, 27, 35, 39, 43, 47, 47, 51, 51, 51];

/// Values the jump-tracking recurrence gives where the two deeper tables
/// disagree with it: `(layer, recurrence)` pairs.
pub const RF_PATCHCLASS35_RECURRENCE_TAIL: &[(usize, usize)] = &[(10, 33), (11, 35), (12, 37), (13, 37)];
pub const RF_PATCHCLASS51_RECURRENCE_TAIL: &[(usize, usize)] = &[(12, 49), (13, 51), (14, 53), (15, 53)];

/// Layer index of the first stride-2 transposed convolution in the deeper
/// tables; per-layer values agree up to and including it.
pub const FIRST_TCONV_PATCHCLASS35: usize = 7;
pub const FIRST_TCONV_PATCHCLASS51: usize = 9;

/// AUROC by counting every positive/negative pair, ties worth one half.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Mirror index for one reflection: `-1 -> 0`, `n -> n - 1`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    assert!((0..n).contains(&j), "window wider than the map");
    j as usize
}

/// Plain windowed mean of the roi-masked scores, looping over every window
/// cell, with mirrored borders.
pub fn naive_density(scores: &Array2<f64>, roi: &Array2<bool>, k: usize) -> Array2<f64> {
    let (h, w) = scores.dim();
    let r = (k / 2) as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut sum = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (mirror(i as isize + di, h), mirror(j as isize + dj, w));
                if roi[[y, x]] {
                    sum += scores[[y, x]];
                }
            }
        }
        sum / (k * k) as f64
    })
}

/// One grid point as re-derived by [`exhaustive_grid`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OraclePoint {
    pub theta: f64,
    pub density_size: usize,
    pub f1: f64,
}

/// Re-evaluates every `(theta, K_d)` from scratch: naive density, threshold,
/// centroid over the roi, centroid-in-box outcome, F1. Returns the surface in
/// grid order and the best point (highest F1, then smallest `K_d`, then
/// largest `theta`).
pub fn exhaustive_grid(
    maps: &[ClassificationMap],
    annotations: &[Option<&ObstacleAnnotation>],
    grid: &GridSpec,
) -> (Vec<OraclePoint>, OraclePoint) {
    let mut surface = Vec::new();
    for &k in &grid.density_sizes {
        let densities: Vec<_> = maps.iter().map(|m| naive_density(&m.scores, &m.roi, k)).collect();
        for &theta in &grid.thetas {
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for ((d, m), a) in densities.iter().zip(maps).zip(annotations) {
                let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
                for ((r, c), &v) in d.indexed_iter() {
                    if m.roi[[r, c]] && v >= theta && v != 0.0 {
                        sr += r as f64;
                        sc += c as f64;
                        n += 1;
                    }
                }
                let hit = (n >= grid.min_pixels.max(1)).then(|| (sr / n as f64, sc / n as f64));
                match (a, hit) {
                    (Some(a), Some((r, c))) => {
                        let b = &a.bbox;
                        let inside = r >= b.row_min as f64 && r <= b.row_max as f64 && c >= b.col_min as f64 && c <= b.col_max as f64;
                        if inside {
                            tp += 1.0;
                        } else {
                            fp += 1.0;
                        }
                    }
                    (Some(_), None) => fn_ += 1.0,
                    (None, Some(_)) => fp += 1.0,
                    (None, None) => {}
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            surface.push(OraclePoint { theta, density_size: k, f1 });
        }
    }
    let mut best = surface[0];
    for &p in &surface[1..] {
        let better = p.f1 > best.f1
            || (p.f1 == best.f1 && (p.density_size < best.density_size || (p.density_size == best.density_size && p.theta > best.theta)));
        if better {
            best = p;
        }
    }
    (surface, best)
}

/// A 32x32 map with a railway band, background noise, and (when `obstacle`)
/// a brighter blob somewhere on the band.
pub fn synthetic_map(rng: &mut ChaCha8Rng, id: usize, obstacle: bool) -> (ClassificationMap, Option<ObstacleAnnotation>) {
    let (h, w) = (32, 32);
    let c0 = rng.random_range(4..12);
    let c1 = c0 + rng.random_range(10..18);
    let roi = Array2::from_shape_fn((h, w), |(_, c)| (c0..c1).contains(&c));
    let mut scores = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..0.35));
    let annotation = obstacle.then(|| {
        let (bh, bw) = (rng.random_range(3..9), rng.random_range(3..7));
        let r = rng.random_range(0..h - bh);
        let c = rng.random_range(c0..=c1 - bw);
        let mut mask = Array2::from_elem((h, w), false);
        for i in r..r + bh {
            for j in c..(c + bw).min(w) {
                mask[[i, j]] = true;
                scores[[i, j]] = rng.random_range(0.4..1.0);
            }
        }
        ObstacleAnnotation::from_mask(mask, "blob").expect("non-empty")
    });
    // Occasional distractor outside any obstacle.
    if rng.random_bool(0.3) {
        let (r, c) = (rng.random_range(0..h - 3), rng.random_range(0..w - 3));
        for i in r..r + 3 {
            for j in c..c + 3 {
                scores[[i, j]] = rng.random_range(0.5..1.0);
            }
        }
    }
    let map = ClassificationMap::new(format!("map{id}"), scores, roi, ScoreSource::Local).expect("valid map");
    (map, annotation)
}

/// Central finite differences of `f` at every coordinate of `x`.
pub fn numeric_gradient<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    step: f64,
    mut f: impl FnMut(&ndarray::Array<f64, D>) -> f64,
) -> ndarray::Array<f64, D> {
    let mut probe = x.clone();
    let mut out = ndarray::Array::<f64, D>::zeros(x.raw_dim());
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice_memory_order().expect("contiguous")[i];
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig + step;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig - step;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig;
        out.as_slice_memory_order_mut().expect("contiguous")[i] = (up - down) / (2.0 * step);
    }
    out
}

/// Compares an analytic gradient with a numeric one. Each component must
/// agree to `rel` of the larger magnitude, with magnitudes below
/// `rel * max|g|` treated as that floor.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel: f64) -> Result<f64, String> {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = rel * scale;
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE);
        let err = (a - n).abs() / denom;
        if err > rel {
            return Err(format!("component {i}: analytic {a:e} vs numeric {n:e} (relative error {err:e})"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Random `[n, c, h, w]` values in `[lo, hi)`.
pub fn random4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.random_range(lo..hi))
}

/// A value in `(margin, 1 - margin)` at least `margin` away from every
/// histogram bin center `k / (bins - 1)`, where the soft histogram has kinks.
pub fn away_from_bin_centers(rng: &mut ChaCha8Rng, bins: usize, margin: f64) -> f64 {
    loop {
        let v: f64 = rng.random_range(margin..1.0 - margin);
        let pos = v * (bins - 1) as f64;
        if (pos - pos.round()).abs() / (bins - 1) as f64 >= margin {
            return v;
        }
    }
}
