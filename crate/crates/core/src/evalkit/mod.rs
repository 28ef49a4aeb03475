//! Evaluation: pooled pixel AUROC, centroid-in-box detection outcomes, F1,
//! the `(theta, K_d)` grid search, and ablation tables.

mod ablation;
mod auroc;
mod grid;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_report, parse_ablation_csv, AblationRow, AblationTable};
pub use auroc::{auroc, pixel_auroc};
pub use grid::{grid_search, grid_search_uncached, GridPoint, GridSpec, ImageOutcome, MetricsReport};

use crate::forge::BBox;
use crate::localize::DetectionResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    FN,
    TN,
}

/// Classifies one image. With an annotation, a detection counts only when
/// its centroid lies inside the box (edges included); a centroid elsewhere
/// is a false positive. Without one, any detection is a false positive.
pub fn detection_outcome(result: &DetectionResult, bbox: Option<&BBox>) -> Outcome {
    outcome_of(result.detected, result.centroid, bbox)
}

pub(crate) fn outcome_of(detected: bool, centroid: Option<(f64, f64)>, bbox: Option<&BBox>) -> Outcome {
    match (bbox, detected.then_some(centroid).flatten()) {
        (Some(b), Some((r, c))) if b.contains(r, c) => Outcome::TP,
        (Some(_), Some(_)) => Outcome::FP,
        (Some(_), None) => Outcome::FN,
        (None, Some(_)) => Outcome::FP,
        (None, None) => Outcome::TN,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1, each 0 when its denominator vanishes.
pub fn f1_from_outcomes(outcomes: &[Outcome]) -> F1Score {
    let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count() as f64;
    let (tp, fp, fn_) = (count(Outcome::TP), count(Outcome::FP), count(Outcome::FN));
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    F1Score { precision, recall, f1: ratio(2.0 * precision * recall, precision + recall) }
}
