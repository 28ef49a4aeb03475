use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Provenance, RailwayScene};
use crate::error::{Error, Result};

/// Top-left offset of a `size`-long window centered at `center`, shifted to
/// stay inside `[0, extent)`.
pub(crate) fn clamp_window(center: usize, size: usize, extent: usize) -> usize {
    center.saturating_sub(size / 2).min(extent - size)
}

/// Square crops centered on railway pixels drawn uniformly from `rail_mask`.
pub fn extract_roi_crops(
    image: &Array3<f32>,
    rail_mask: &Array2<bool>,
    crop_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<RailwayScene>> {
    let (h, w, _) = image.dim();
    if crop_size == 0 || crop_size > h.min(w) {
        return Err(Error::CropTooLarge { crop: crop_size, height: h, width: w });
    }
    let rail: Vec<(usize, usize)> = rail_mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if rail.is_empty() {
        return Err(Error::NoRailwayRegion);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..count)
        .map(|i| {
            let (r, c) = rail[rng.random_range(0..rail.len())];
            let top = clamp_window(r, crop_size, h);
            let left = clamp_window(c, crop_size, w);
            RailwayScene {
                scene_id: format!("crop{seed}_{i:04}"),
                provenance: Provenance::RealCrop,
                image: image.slice(s![top..top + crop_size, left..left + crop_size, ..]).to_owned(),
                rail_mask: rail_mask.slice(s![top..top + crop_size, left..left + crop_size]).to_owned(),
                obstacle: None,
            }
        })
        .collect();
    Ok(crops)
}
