use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::Serialize;

use super::{ClassificationMap, DetectionResult, LocalizationParams, ScoreSource};
use crate::error::{Error, Result};
use crate::fsutil::write_json;

#[derive(Serialize)]
struct ScoreSidecar<'a> {
    source: ScoreSource,
    scene_id: &'a str,
    scores: String,
    roi: String,
}

/// Writes `<id>_score.png` (16-bit grey, score · 65535), `<id>_roi.png`
/// (8-bit, 255 = railway), and a JSON sidecar `<id>_score.json`.
pub fn write_score_map(map: &ClassificationMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &map.scene_id;
    let (h, w) = map.scores.dim();
    let score_name = format!("{id}_score.png");
    let roi_name = format!("{id}_roi.png");
    let scores: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.scores[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    let path = dir.join(&score_name);
    scores.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
    let roi = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if map.roi[[y as usize, x as usize]] { 255 } else { 0 }]));
    let path = dir.join(&roi_name);
    roi.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
    write_json(
        &dir.join(format!("{id}_score.json")),
        &ScoreSidecar { source: map.source, scene_id: id, scores: score_name, roi: roi_name },
    )
}

/// JSON summary of a detection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub params: LocalizationParams,
    pub detected: bool,
    pub centroid: Option<(f64, f64)>,
    /// Nonzero pixels of the thresholded density map.
    pub mask_pixels: usize,
}

impl DetectionRecord {
    pub fn new(scene_id: &str, params: LocalizationParams, result: &DetectionResult) -> Self {
        DetectionRecord {
            scene_id: scene_id.to_string(),
            params,
            detected: result.detected,
            centroid: result.centroid,
            mask_pixels: result.mask.iter().filter(|&&v| v != 0.0).count(),
        }
    }
}

pub fn write_detection(record: &DetectionRecord, path: &Path) -> Result<()> {
    write_json(path, record)
}
