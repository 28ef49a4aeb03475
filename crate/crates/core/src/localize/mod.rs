//! Turning per-pixel anomaly scores into an obstacle mask and a centroid:
//! mask to the railway, smooth with a `K_d x K_d` mean filter (the density
//! map), zero values below `theta`, and average the surviving coordinates.

mod export;
mod scoring;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use export::{write_detection, write_score_map, DetectionRecord};
pub use scoring::{reconstruction_error_map, score_map_global, score_map_local, IdentityGenerator, ReconMetric, Reconstruct};
pub(crate) use scoring::pair_input;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Local,
    GlobalDiff,
    ReconMse,
    ReconSsim,
}

/// Per-pixel anomaly confidence in `[0, 1]` together with the railway region
/// it is evaluated on. Scores outside `roi` carry no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMap {
    pub scene_id: String,
    pub scores: Array2<f64>,
    pub roi: Array2<bool>,
    pub source: ScoreSource,
}

impl ClassificationMap {
    pub fn new(scene_id: impl Into<String>, scores: Array2<f64>, roi: Array2<bool>, source: ScoreSource) -> Result<Self> {
        if scores.dim() != roi.dim() {
            return Err(Error::ShapeMismatch(format!("scores {:?} vs roi {:?}", scores.dim(), roi.dim())));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("scores must be finite".into()));
        }
        Ok(ClassificationMap { scene_id: scene_id.into(), scores, roi, source })
    }

    /// Scores with everything outside the region of interest set to zero.
    pub fn masked_scores(&self) -> Array2<f64> {
        let mut out = self.scores.clone();
        Zip::from(&mut out).and(&self.roi).for_each(|v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationParams {
    pub theta: f64,
    pub density_size: usize,
}

impl LocalizationParams {
    pub fn new(theta: f64, density_size: usize) -> Result<Self> {
        if density_size.is_multiple_of(2) {
            return Err(Error::EvenDensitySize(density_size));
        }
        Ok(LocalizationParams { theta, density_size })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub density: Array2<f64>,
    pub mask: Array2<f64>,
    pub centroid: Option<(f64, f64)>,
    pub detected: bool,
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Windowed sums of `line` with reflected borders. Summed directly rather
/// than by prefix differences so all-zero windows give exactly zero.
fn window_sums(line: &[f64], size: usize, out: &mut [f64]) {
    let n = line.len();
    let r = (size / 2) as isize;
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = (o as isize - r..=o as isize + r).map(|i| line[reflect(i, n)]).sum();
    }
}

/// Mean over the `size x size` window centred on each pixel of the
/// roi-masked scores, with reflected borders.
pub fn density_map(map: &ClassificationMap, size: usize) -> Result<Array2<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::EvenDensitySize(size));
    }
    let (h, w) = map.scores.dim();
    if size > h.min(w) {
        return Err(Error::DensityTooLarge { size, height: h, width: w });
    }
    let masked = map.masked_scores();
    if size == 1 {
        return Ok(masked);
    }
    let mut rows = Array2::<f64>::zeros((h, w));
    let mut line = vec![0.0; w];
    let mut buf = vec![0.0; w];
    for i in 0..h {
        line.iter_mut().zip(masked.row(i)).for_each(|(d, &s)| *d = s);
        window_sums(&line, size, &mut buf);
        rows.row_mut(i).iter_mut().zip(&buf).for_each(|(d, &s)| *d = s);
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let mut col = vec![0.0; h];
    let mut cbuf = vec![0.0; h];
    let norm = (size * size) as f64;
    for j in 0..w {
        col.iter_mut().zip(rows.column(j)).for_each(|(d, &s)| *d = s);
        window_sums(&col, size, &mut cbuf);
        out.column_mut(j).iter_mut().zip(&cbuf).for_each(|(d, &s)| *d = s / norm);
    }
    Ok(out)
}

/// Keeps values `>= theta`, zeroing the rest.
pub fn threshold_mask(density: &Array2<f64>, theta: f64) -> Array2<f64> {
    density.mapv(|v| if v >= theta { v } else { 0.0 })
}

/// Unweighted mean `(row, col)` of the nonzero pixels inside `roi`, or `None`
/// when fewer than `min_pixels` such pixels exist.
pub fn centroid(mask: &Array2<f64>, roi: &Array2<bool>, min_pixels: usize) -> Option<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (((r, c), &v), &inside) in mask.indexed_iter().zip(roi.iter()) {
        if v != 0.0 && inside {
            sr += r as f64;
            sc += c as f64;
            n += 1;
        }
    }
    (n >= min_pixels.max(1)).then(|| (sr / n as f64, sc / n as f64))
}

/// Localizes the obstacle in `map` from a precomputed density map.
pub fn localize_density(density: Array2<f64>, roi: &Array2<bool>, theta: f64, min_pixels: usize) -> DetectionResult {
    let mask = threshold_mask(&density, theta);
    let centroid = centroid(&mask, roi, min_pixels);
    DetectionResult { density, mask, detected: centroid.is_some(), centroid }
}

/// Density map, threshold, and centroid in one step.
pub fn localize(map: &ClassificationMap, params: &LocalizationParams, min_pixels: usize) -> Result<DetectionResult> {
    let density = density_map(map, params.density_size)?;
    Ok(localize_density(density, &map.roi, params.theta, min_pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(scores: Array2<f64>) -> ClassificationMap {
        let roi = Array2::from_elem(scores.dim(), true);
        ClassificationMap::new("m", scores, roi, ScoreSource::Local).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn constant_map_is_fixed() {
        let m = map(Array2::from_elem((9, 12), 0.37));
        for k in [1, 3, 5, 9] {
            assert!(density_map(&m, k).unwrap().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn single_impulse_spreads_to_block() {
        let mut s = Array2::zeros((5, 5));
        s[[2, 2]] = 1.0;
        let d = density_map(&map(s), 3).unwrap();
        for ((r, c), &v) in d.indexed_iter() {
            let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
            let want = if inside { 1.0 / 9.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "({r},{c}) = {v}");
        }
    }

    #[test]
    fn roi_masking_happens_first() {
        let scores = Array2::from_elem((5, 5), 1.0);
        let roi = Array2::from_shape_fn((5, 5), |(_, c)| c < 2);
        let m = ClassificationMap::new("m", scores, roi, ScoreSource::Local).unwrap();
        let d = density_map(&m, 1).unwrap();
        assert_eq!(d[[0, 0]], 1.0);
        assert_eq!(d[[0, 4]], 0.0);
    }

    #[test]
    fn errors() {
        let m = map(Array2::zeros((5, 5)));
        assert!(matches!(density_map(&m, 4), Err(Error::EvenDensitySize(4))));
        assert!(matches!(density_map(&m, 7), Err(Error::DensityTooLarge { .. })));
        assert!(LocalizationParams::new(0.5, 2).is_err());
    }

    #[test]
    fn thresholds() {
        let d = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64 / 8.0);
        assert_eq!(threshold_mask(&d, 0.0), d);
        assert!(threshold_mask(&d, 1.0 + 1e-9).iter().all(|&v| v == 0.0));
        let t = threshold_mask(&d, 0.5);
        for (a, b) in t.iter().zip(d.iter()) {
            assert_eq!(*a, if *b >= 0.5 { *b } else { 0.0 });
        }
    }

    #[test]
    fn centroids() {
        let roi = Array2::from_elem((3, 3), true);
        let mut m = Array2::zeros((3, 3));
        assert_eq!(centroid(&m, &roi, 1), None);
        m[[2, 2]] = 0.4;
        assert_eq!(centroid(&m, &roi, 1), Some((2.0, 2.0)));
        let mut corners = Array2::zeros((3, 3));
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            corners[[r, c]] = 1.0;
        }
        assert_eq!(centroid(&corners, &roi, 1), Some((1.0, 1.0)));
        assert_eq!(centroid(&corners, &roi, 5), None);
    }

    #[test]
    fn block_is_localized() {
        let mut s = Array2::from_elem((64, 64), 0.05);
        for r in 20..30 {
            for c in 40..50 {
                s[[r, c]] = 0.95;
            }
        }
        let res = localize(&map(s), &LocalizationParams::new(0.5, 7).unwrap(), 1).unwrap();
        let (r, c) = res.centroid.unwrap();
        assert!((20.0..=29.0).contains(&r) && (40.0..=49.0).contains(&c));
        assert!(res.detected);
    }

    #[test]
    fn all_zero_is_not_detected() {
        let res = localize(&map(Array2::zeros((16, 16))), &LocalizationParams::new(0.0, 3).unwrap(), 1).unwrap();
        assert!(!res.detected && res.centroid.is_none());
    }

    #[test]
    fn identity_composition() {
        let s = Array2::from_shape_fn((6, 6), |(r, c)| if (r + c) % 4 == 0 { 0.3 } else { 0.0 });
        let m = map(s.clone());
        let res = localize(&m, &LocalizationParams::new(0.0, 1).unwrap(), 1).unwrap();
        assert_eq!(res.centroid, centroid(&s, &m.roi, 1));
    }
}
