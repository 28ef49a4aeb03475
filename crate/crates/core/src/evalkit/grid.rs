use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{f1_from_outcomes, outcome_of, pixel_auroc, Outcome};
use crate::error::{Error, Result};
use crate::forge::ObstacleAnnotation;
use crate::localize::{centroid, density_map, localize, threshold_mask, ClassificationMap, LocalizationParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub thetas: Vec<f64>,
    pub density_sizes: Vec<usize>,
    pub min_pixels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            thetas: (1..=19).map(|k| k as f64 / 20.0).collect(),
            density_sizes: vec![7, 11, 13, 21, 29, 35, 51],
            min_pixels: 1,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thetas.is_empty() || self.density_sizes.is_empty() {
            return Err(Error::Config("grid needs at least one theta and one density size".into()));
        }
        if let Some(&k) = self.density_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::EvenDensitySize(k));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta: f64,
    pub density_size: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub scene_id: String,
    pub outcome: Outcome,
    pub centroid: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method_label: String,
    /// Pooled pixel AUROC; absent when the pool lacks positives or negatives.
    pub auroc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_params: LocalizationParams,
    pub grid_surface: Vec<GridPoint>,
    /// Outcomes at `best_params`.
    pub per_image: Vec<ImageOutcome>,
}

type Evaluated = Vec<(Outcome, Option<(f64, f64)>)>;

/// Strictly better F1 wins; equal F1 prefers the smaller `K_d`, then the
/// larger `theta`.
fn better(candidate: &GridPoint, best: &GridPoint) -> bool {
    if candidate.f1 != best.f1 {
        return candidate.f1 > best.f1;
    }
    if candidate.density_size != best.density_size {
        return candidate.density_size < best.density_size;
    }
    candidate.theta > best.theta
}

fn search(
    maps: &[ClassificationMap],
    annotations: &[Option<&ObstacleAnnotation>],
    grid: &GridSpec,
    method_label: &str,
    evaluate: impl Fn(usize, &[f64]) -> Result<Vec<Evaluated>>,
) -> Result<MetricsReport> {
    grid.validate()?;
    if maps.is_empty() {
        return Err(Error::EmptyInput("no score maps to evaluate"));
    }
    if maps.len() != annotations.len() {
        return Err(Error::ShapeMismatch(format!("{} maps but {} annotations", maps.len(), annotations.len())));
    }
    let mut surface = Vec::new();
    let mut best: Option<(GridPoint, Evaluated)> = None;
    for &k in &grid.density_sizes {
        let per_theta = evaluate(k, &grid.thetas)?;
        for (&theta, evaluated) in grid.thetas.iter().zip(per_theta) {
            let outcomes: Vec<Outcome> = evaluated.iter().map(|e| e.0).collect();
            let s = f1_from_outcomes(&outcomes);
            let point = GridPoint { theta, density_size: k, precision: s.precision, recall: s.recall, f1: s.f1 };
            surface.push(point);
            if best.as_ref().is_none_or(|(b, _)| better(&point, b)) {
                best = Some((point, evaluated));
            }
        }
    }
    let (point, evaluated) = best.expect("grid is non-empty");
    let masks: Vec<Option<&Array2<bool>>> = annotations.iter().map(|a| a.map(|a| &a.mask)).collect();
    let auroc = match pixel_auroc(maps, &masks) {
        Ok(v) => Some(v),
        Err(Error::DegeneratePool { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        method_label: method_label.to_string(),
        auroc,
        precision: point.precision,
        recall: point.recall,
        f1: point.f1,
        best_params: LocalizationParams { theta: point.theta, density_size: point.density_size },
        grid_surface: surface,
        per_image: maps
            .iter()
            .zip(evaluated)
            .map(|(m, (outcome, centroid))| ImageOutcome { scene_id: m.scene_id.clone(), outcome, centroid })
            .collect(),
    })
}

/// Evaluates every `(theta, K_d)` pair and reports the best by F1. Density
/// maps are computed once per `K_d` and reused across thresholds.
pub fn grid_search(
    maps: &[ClassificationMap],
    annotations: &[Option<&ObstacleAnnotation>],
    grid: &GridSpec,
    method_label: &str,
) -> Result<MetricsReport> {
    search(maps, annotations, grid, method_label, |k, thetas| {
        let densities = maps.iter().map(|m| density_map(m, k)).collect::<Result<Vec<_>>>()?;
        Ok(thetas
            .iter()
            .map(|&theta| {
                densities
                    .iter()
                    .zip(maps)
                    .zip(annotations)
                    .map(|((d, m), a)| {
                        let c = centroid(&threshold_mask(d, theta), &m.roi, grid.min_pixels);
                        (outcome_of(c.is_some(), c, a.map(|a| &a.bbox)), c)
                    })
                    .collect()
            })
            .collect())
    })
}

/// Same as [`grid_search`] but recomputes the density map for every grid
/// point; kept as a reference for the cached path.
pub fn grid_search_uncached(
    maps: &[ClassificationMap],
    annotations: &[Option<&ObstacleAnnotation>],
    grid: &GridSpec,
    method_label: &str,
) -> Result<MetricsReport> {
    search(maps, annotations, grid, method_label, |k, thetas| {
        thetas
            .iter()
            .map(|&theta| {
                let params = LocalizationParams::new(theta, k)?;
                maps.iter()
                    .zip(annotations)
                    .map(|(m, a)| {
                        let r = localize(m, &params, grid.min_pixels)?;
                        Ok((super::detection_outcome(&r, a.map(|a| &a.bbox)), r.centroid))
                    })
                    .collect()
            })
            .collect()
    })
}
