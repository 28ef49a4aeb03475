use ndarray::Array2;

use crate::error::{Error, Result};
use crate::localize::ClassificationMap;

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegeneratePool { positives: positives.len(), negatives: negatives.len() });
    }
    let mut pool: Vec<(f64, bool)> = positives.iter().map(|&s| (s, true)).chain(negatives.iter().map(|&s| (s, false))).collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep groups of equal scores from low to high, counting the
    // negatives already passed.
    let (mut wins, mut neg_below) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < pool.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0.0, 0.0);
        while j < pool.len() && pool[j].0 == pool[i].0 {
            if pool[j].1 {
                pos_here += 1.0;
            } else {
                neg_here += 1.0;
            }
            j += 1;
        }
        wins += pos_here * (neg_below + 0.5 * neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(wins / (positives.len() as f64 * negatives.len() as f64))
}

/// AUROC over the pixels of interest of every map: obstacle pixels inside
/// the railway region are positives, the rest of the region negatives.
/// `obstacle_masks[i]` is `None` for an obstacle-free scene.
pub fn pixel_auroc(maps: &[ClassificationMap], obstacle_masks: &[Option<&Array2<bool>>]) -> Result<f64> {
    if maps.len() != obstacle_masks.len() {
        return Err(Error::ShapeMismatch(format!("{} maps but {} obstacle masks", maps.len(), obstacle_masks.len())));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (map, obstacle) in maps.iter().zip(obstacle_masks) {
        if let Some(m) = obstacle {
            if m.dim() != map.roi.dim() {
                return Err(Error::ShapeMismatch(format!("obstacle mask of {} has the wrong size", map.scene_id)));
            }
        }
        for ((p, &s), &inside) in map.scores.indexed_iter().zip(map.roi.iter()) {
            if !inside {
                continue;
            }
            if obstacle.is_some_and(|m| m[p]) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    auroc(&pos, &neg)
}
