//! Pasting a segmented object onto a railway scene.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ObstacleAnnotation, Provenance, RailwayScene};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationParams {
    pub feather_radius_px: usize,
    pub brightness_match: bool,
    pub motion_blur_len_px: usize,
    /// Direction of the motion blur; drawn uniformly from `[0, 180)` when unset.
    pub motion_blur_angle_deg: Option<f64>,
    pub depth_blur_sigma: f64,
    pub noise_sigma: f64,
    pub scale_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            feather_radius_px: 3,
            brightness_match: true,
            motion_blur_len_px: 5,
            motion_blur_angle_deg: None,
            depth_blur_sigma: 1.0,
            noise_sigma: 0.01,
            scale_range: (0.3, 1.0),
            rng_seed: 0,
        }
    }
}

impl AugmentationParams {
    /// Parameters under which compositing is a plain paste.
    pub fn identity(rng_seed: u64) -> Self {
        AugmentationParams {
            feather_radius_px: 0,
            brightness_match: false,
            motion_blur_len_px: 0,
            motion_blur_angle_deg: Some(0.0),
            depth_blur_sigma: 0.0,
            noise_sigma: 0.0,
            scale_range: (1.0, 1.0),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < min <= max, got ({lo}, {hi})")));
        }
        if !(self.depth_blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("blur and noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    fn motion_extent(&self) -> usize {
        self.motion_blur_len_px.saturating_sub(1).div_ceil(2)
    }

    fn depth_radius(&self) -> usize {
        (3.0 * self.depth_blur_sigma).ceil() as usize
    }
}

/// Object layer in premultiplied form on a canvas anchored at scene
/// coordinates `(top, left)`, which may lie partly outside the frame.
struct Layer {
    top: isize,
    left: isize,
    rgb: Array3<f32>,
    alpha: Array2<f32>,
}

impl Layer {
    fn dim(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    /// Scene pixel under canvas pixel `(r, c)`, if inside the frame.
    fn scene_pos(&self, r: usize, c: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (sr, sc) = (self.top + r as isize, self.left + c as isize);
        (sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w).then_some((sr as usize, sc as usize))
    }

    /// Convolves the premultiplied colour and alpha with a sparse kernel of
    /// `(dr, dc, weight)` taps; the canvas margin keeps the result in bounds.
    fn filter(&mut self, taps: &[(isize, isize, f32)]) {
        let (h, w) = self.dim();
        let mut rgb = Array3::<f32>::zeros((h, w, 3));
        let mut alpha = Array2::<f32>::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let a = self.alpha[[r, c]];
                if a == 0.0 {
                    continue;
                }
                for &(dr, dc, k) in taps {
                    let (tr, tc) = (r as isize + dr, c as isize + dc);
                    if tr < 0 || tc < 0 || tr as usize >= h || tc as usize >= w {
                        continue;
                    }
                    let (tr, tc) = (tr as usize, tc as usize);
                    alpha[[tr, tc]] += k * a;
                    for ch in 0..3 {
                        rgb[[tr, tc, ch]] += k * self.rgb[[r, c, ch]];
                    }
                }
            }
        }
        self.rgb = rgb;
        self.alpha = alpha;
    }
}

/// Nearest-neighbour resize of the object and its mask.
fn resize(image: &Array3<f32>, mask: &Array2<bool>, scale: f64) -> (Array3<f32>, Array2<bool>) {
    let (h, w) = mask.dim();
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let src = |d: usize, n: usize, full: usize| (((d as f64 + 0.5) * full as f64 / n as f64) as usize).min(full - 1);
    let img = Array3::from_shape_fn((nh, nw, 3), |(r, c, ch)| image[[src(r, nh, h), src(c, nw, w), ch]]);
    let m = Array2::from_shape_fn((nh, nw), |(r, c)| mask[[src(r, nh, h), src(c, nw, w)]]);
    (img, m)
}

fn motion_taps(len: usize, angle_deg: f64) -> Vec<(isize, isize, f32)> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let weight = 1.0 / len as f32;
    (0..len)
        .map(|i| {
            let t = i as f64 - (len - 1) as f64 / 2.0;
            ((-t * sin).round() as isize, (t * cos).round() as isize, weight)
        })
        .collect()
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / z) as f32).collect()
}

/// Mean of `values` over a `(2r+1)^2` window, zero outside the array.
fn box_mean(values: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = values.dim();
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f32;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                    s += values[[a as usize, b as usize]];
                }
            }
        }
        s / norm
    })
}

/// Pastes `object_image` (masked by `object_mask`) onto `scene` so that the
/// object's mask centroid lands on a random railway pixel, then applies the
/// augmentation chain: scale, brightness match, motion blur, depth blur,
/// border feathering, and additive noise.
pub fn composite_obstacle(
    scene: &RailwayScene,
    object_image: &Array3<f32>,
    object_mask: &Array2<bool>,
    params: &AugmentationParams,
) -> Result<RailwayScene> {
    params.validate()?;
    if scene.obstacle.is_some() {
        return Err(Error::InvalidScene { scene_id: scene.scene_id.clone(), reason: "scene already has an obstacle".into() });
    }
    if object_image.dim().0 != object_mask.dim().0 || object_image.dim().1 != object_mask.dim().1 {
        return Err(Error::ShapeMismatch("object image and mask differ in size".into()));
    }
    if !object_mask.iter().any(|&v| v) {
        return Err(Error::EmptyObjectMask);
    }
    let rail: Vec<(usize, usize)> = scene.rail_mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if rail.is_empty() {
        return Err(Error::NoRailwayRegion);
    }
    let (h, w) = (scene.height(), scene.width());
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    // scale
    let (lo, hi) = params.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (mut obj, mask) = resize(object_image, object_mask, scale);
    let (oh, ow) = mask.dim();
    if oh > h || ow > w {
        return Err(Error::ObstacleExceedsFrame);
    }
    let (mut sum_r, mut sum_c, mut count) = (0.0, 0.0, 0usize);
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            sum_r += r as f64;
            sum_c += c as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyObjectMask);
    }
    let (target_r, target_c) = rail[rng.random_range(0..rail.len())];
    let obj_top = target_r as isize - (sum_r / count as f64).round() as isize;
    let obj_left = target_c as isize - (sum_c / count as f64).round() as isize;

    // brightness correction against the background the object will cover
    if params.brightness_match {
        let (mut bg, mut fg, mut n) = ([0.0f64; 3], [0.0f64; 3], 0usize);
        for ((r, c), &v) in mask.indexed_iter() {
            let (sr, sc) = (obj_top + r as isize, obj_left + c as isize);
            if !v || sr < 0 || sc < 0 || sr as usize >= h || sc as usize >= w {
                continue;
            }
            for ch in 0..3 {
                bg[ch] += scene.image[[sr as usize, sc as usize, ch]] as f64;
                fg[ch] += obj[[r, c, ch]] as f64;
            }
            n += 1;
        }
        if n > 0 {
            for ch in 0..3 {
                let shift = ((bg[ch] - fg[ch]) / n as f64) as f32;
                for ((r, c), &v) in mask.indexed_iter() {
                    if v {
                        obj[[r, c, ch]] = (obj[[r, c, ch]] + shift).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let margin = params.motion_extent() + params.depth_radius() + params.feather_radius_px;
    let (ch_, cw) = (oh + 2 * margin, ow + 2 * margin);
    let mut layer = Layer {
        top: obj_top - margin as isize,
        left: obj_left - margin as isize,
        rgb: Array3::zeros((ch_, cw, 3)),
        alpha: Array2::zeros((ch_, cw)),
    };
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            layer.alpha[[r + margin, c + margin]] = 1.0;
            for ch in 0..3 {
                layer.rgb[[r + margin, c + margin, ch]] = obj[[r, c, ch]];
            }
        }
    }

    let angle = match params.motion_blur_angle_deg {
        Some(a) => a,
        None => rng.random_range(0.0..180.0),
    };
    if params.motion_blur_len_px >= 2 {
        layer.filter(&motion_taps(params.motion_blur_len_px, angle));
    }
    if params.depth_blur_sigma > 0.0 {
        let radius = params.depth_radius();
        let taps = gaussian_taps(params.depth_blur_sigma, radius);
        let r = radius as isize;
        let rows: Vec<_> = taps.iter().enumerate().map(|(i, &k)| (i as isize - r, 0, k)).collect();
        let cols: Vec<_> = taps.iter().enumerate().map(|(i, &k)| (0, i as isize - r, k)).collect();
        layer.filter(&rows);
        layer.filter(&cols);
    }

    // Un-premultiply before feathering so colour stays that of the object.
    for ((r, c), a) in layer.alpha.indexed_iter() {
        for ch in 0..3 {
            let v = &mut layer.rgb[[r, c, ch]];
            *v = if *a > 0.0 { (*v / a).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    if params.feather_radius_px > 0 {
        // Inward feathering: alpha fades towards the border without
        // extending the support.
        let soft = box_mean(&layer.alpha, params.feather_radius_px);
        layer.alpha.zip_mut_with(&soft, |a, &s| *a = (*a * s).min(1.0));
    }

    let noise = Normal::new(0.0f64, params.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = scene.clone();
    let mut obstacle = Array2::from_elem((h, w), false);
    let (lh, lw) = layer.dim();
    for r in 0..lh {
        for c in 0..lw {
            let a = layer.alpha[[r, c]];
            if a <= 0.0 {
                continue;
            }
            let Some((sr, sc)) = layer.scene_pos(r, c, h, w) else { continue };
            for ch in 0..3 {
                let bg = out.image[[sr, sc, ch]];
                let mut v = bg * (1.0 - a) + layer.rgb[[r, c, ch]] * a;
                if params.noise_sigma > 0.0 {
                    v = (v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
                out.image[[sr, sc, ch]] = v;
            }
            obstacle[[sr, sc]] = a > 0.5;
        }
    }
    out.obstacle = Some(ObstacleAnnotation::from_mask(obstacle, "composited").map_err(|_| Error::ObstacleVanished)?);
    out.provenance = Provenance::Composited;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn plain_scene(h: usize, w: usize) -> RailwayScene {
        RailwayScene {
            scene_id: "base".into(),
            provenance: Provenance::Procedural,
            image: Array3::from_shape_fn((h, w, 3), |(r, c, k)| ((r * 3 + c * 5 + k * 11) % 200) as f32 / 255.0),
            rail_mask: Array2::from_shape_fn((h, w), |(r, c)| (20..44).contains(&c) && (10..54).contains(&r)),
            obstacle: None,
        }
    }

    fn disc(size: usize) -> (Array3<f32>, Array2<bool>) {
        let c = (size as f64 - 1.0) / 2.0;
        let mask = Array2::from_shape_fn((size, size), |(r, q)| {
            let (dr, dq) = (r as f64 - c, q as f64 - c);
            dr * dr + dq * dq <= c * c
        });
        let img = Array3::from_shape_fn((size, size, 3), |(r, q, k)| ((r * 13 + q * 7 + k * 50) % 255) as f32 / 255.0);
        (img, mask)
    }

    #[test]
    fn identity_params_paste_exactly() {
        let scene = plain_scene(64, 64);
        let (img, mask) = disc(9);
        let out = composite_obstacle(&scene, &img, &mask, &AugmentationParams::identity(5)).unwrap();
        let obs = out.obstacle.as_ref().unwrap();
        assert_eq!(obs.mask.iter().filter(|&&v| v).count(), mask.iter().filter(|&&v| v).count());
        let b = obs.bbox;
        // the pasted mask is the source mask translated to the bbox corner
        let window = obs.mask.slice(s![b.row_min..=b.row_max, b.col_min..=b.col_max]);
        assert_eq!(window, mask);
        for ((r, c), &v) in mask.indexed_iter() {
            for ch in 0..3 {
                let got = out.image[[b.row_min + r, b.col_min + c, ch]];
                if v {
                    assert_eq!(got, img[[r, c, ch]]);
                } else {
                    assert_eq!(got, scene.image[[b.row_min + r, b.col_min + c, ch]]);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let scene = plain_scene(64, 64);
        let (img, mask) = disc(12);
        let p = AugmentationParams { rng_seed: 99, ..Default::default() };
        let a = composite_obstacle(&scene, &img, &mask, &p).unwrap();
        let b = composite_obstacle(&scene, &img, &mask, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conservation_outside_dilated_support() {
        let scene = plain_scene(64, 64);
        let (img, mask) = disc(14);
        let p = AugmentationParams { rng_seed: 3, motion_blur_angle_deg: Some(30.0), ..Default::default() };
        let out = composite_obstacle(&scene, &img, &mask, &p).unwrap();
        let obs = out.obstacle.unwrap();
        // scaled object is at most 14 px; its canvas is within bbox +- (14 + margin)
        let margin = p.motion_extent() + p.depth_radius() + p.feather_radius_px;
        let reach = 14 + margin;
        for ((r, c), _) in scene.rail_mask.indexed_iter() {
            let near = r + reach >= obs.bbox.row_min
                && r <= obs.bbox.row_max + reach
                && c + reach >= obs.bbox.col_min
                && c <= obs.bbox.col_max + reach;
            if !near {
                for ch in 0..3 {
                    assert_eq!(out.image[[r, c, ch]].to_bits(), scene.image[[r, c, ch]].to_bits());
                }
            }
        }
    }

    #[test]
    fn oversized_object_is_rejected() {
        let scene = plain_scene(32, 32);
        let (img, mask) = disc(40);
        let err = composite_obstacle(&scene, &img, &mask, &AugmentationParams::identity(0)).unwrap_err();
        assert_eq!(err.to_string(), "obstacle exceeds frame");
    }

    #[test]
    fn half_scale_area() {
        let scene = plain_scene(64, 64);
        let img = Array3::from_elem((40, 40, 3), 0.5f32);
        let mask = Array2::from_elem((40, 40), true);
        let p = AugmentationParams { scale_range: (0.5, 0.5), ..AugmentationParams::identity(1) };
        let out = composite_obstacle(&scene, &img, &mask, &p).unwrap();
        let area = out.obstacle.unwrap().mask.iter().filter(|&&v| v).count();
        // independent oracle: nearest-neighbour resize of a full 40x40 mask
        let oracle = (0..20).flat_map(|r| (0..20).map(move |c| (r * 2 + 1, c * 2 + 1))).filter(|&(r, c)| mask[[r, c]]).count();
        assert_eq!(oracle, 400);
        assert!((area as f64 - 400.0).abs() <= 40.0, "area {area}");
    }

    #[test]
    fn motion_kernel_is_normalized_line() {
        let taps = motion_taps(5, 0.0);
        assert_eq!(taps.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0; 5]);
        assert_eq!(taps.iter().map(|t| t.1).collect::<Vec<_>>(), vec![-2, -1, 0, 1, 2]);
        assert!((taps.iter().map(|t| t.2).sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
