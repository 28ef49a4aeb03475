//! Procedural railway scenes and non-railway images for small end-to-end runs.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{composite_obstacle, derive_seed, quantize_8bit, AugmentationParams, Provenance, RailwayScene};
use crate::error::{Error, Result};

/// Smooth noise: a coarse random grid bilinearly upsampled to `size`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Array2<f32> {
    let g = cells + 1;
    let grid = Array2::from_shape_simple_fn((g, g), || rng.random::<f32>());
    let step = (size.max(2) - 1) as f32 / cells as f32;
    Array2::from_shape_fn((size, size), |(r, c)| {
        let (fr, fc) = (r as f32 / step, c as f32 / step);
        let (r0, c0) = ((fr as usize).min(cells - 1), (fc as usize).min(cells - 1));
        let (tr, tc) = (fr - r0 as f32, fc - c0 as f32);
        let top = grid[[r0, c0]] * (1.0 - tc) + grid[[r0, c0 + 1]] * tc;
        let bottom = grid[[r0 + 1, c0]] * (1.0 - tc) + grid[[r0 + 1, c0 + 1]] * tc;
        top * (1.0 - tr) + bottom * tr
    })
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|v| v + rng.random_range(-amount..=amount))
}

/// Gravel-like texture: fine grain plus coarse blotches around a
/// grey-brown base.
fn ballast(rng: &mut ChaCha8Rng, size: usize) -> Array3<f32> {
    let base = jitter(rng, [0.50, 0.47, 0.43], 0.06);
    let blotch = value_noise(rng, size, 6);
    let grain = Normal::new(0.0f32, 0.07).unwrap();
    let tint = Normal::new(0.0f32, 0.015).unwrap();
    let mut img = Array3::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let g = grain.sample(rng) + 0.12 * (blotch[[r, c]] - 0.5);
            for (ch, &b) in base.iter().enumerate() {
                img[[r, c, ch]] = (b + g + tint.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn paint(img: &mut Array3<f32>, r: usize, c: usize, color: [f32; 3], rng: &mut ChaCha8Rng, noise: f32) {
    let n = rng.random_range(-noise..=noise);
    for (ch, &v) in color.iter().enumerate() {
        img[[r, c, ch]] = (v + n).clamp(0.0, 1.0);
    }
}

/// A solid random ellipse or convex polygon on a `size x size` canvas, with a
/// random colour, a shading gradient, and light texture.
fn shape_with(rng: &mut ChaCha8Rng, size: usize) -> (Array3<f32>, Array2<bool>, &'static str) {
    let half = size as f64 / 2.0;
    let center = (half - 0.5, half - 0.5);
    let (label, mask) = if rng.random_bool(0.5) {
        let a = half * rng.random_range(0.6..=1.0);
        let b = half * rng.random_range(0.6..=1.0);
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        let mask = Array2::from_shape_fn((size, size), |(r, c)| {
            let (y, x) = (r as f64 - center.0, c as f64 - center.1);
            let (u, v) = (x * cos + y * sin, -x * sin + y * cos);
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
        ("ellipse", mask)
    } else {
        let k = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&t| {
                let rad = half * rng.random_range(0.75..=1.0);
                (center.0 + rad * t.sin(), center.1 + rad * t.cos())
            })
            .collect();
        let mask = Array2::from_shape_fn((size, size), |(r, c)| point_in_polygon(r as f64, c as f64, &verts));
        ("polygon", mask)
    };
    let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let (gr, gc) = (rng.random_range(-0.15f32..0.15), rng.random_range(-0.15f32..0.15));
    let mut img = Array3::zeros((size, size, 3));
    for r in 0..size {
        for c in 0..size {
            let shade = gr * (r as f32 / size as f32 - 0.5) + gc * (c as f32 / size as f32 - 0.5);
            let col = color.map(|v| v + shade);
            paint(&mut img, r, c, col, rng, 0.03);
        }
    }
    (img, mask, label)
}

fn point_in_polygon(y: f64, x: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (yi, xi) = verts[i];
        let (yj, xj) = verts[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// A random solid shape (ellipse or polygon) usable as an obstacle.
/// Returns the object image, its mask, and a shape label.
pub fn random_shape(size: usize, seed: u64) -> (Array3<f32>, Array2<bool>, &'static str) {
    shape_with(&mut ChaCha8Rng::seed_from_u64(seed), size.max(3))
}

struct Track {
    bottom_center: f64,
    half_width: f64,
}

/// Renders a scene with `rail_count` tracks converging mildly towards a
/// vanishing column. Without `obstacle` the scene is clean; with it, one
/// random shape is composited onto the rails.
pub fn gen_toy_scene(size: usize, rail_count: usize, obstacle: bool, seed: u64) -> Result<RailwayScene> {
    if size < 32 {
        return Err(Error::Config(format!("toy scenes need size >= 32, got {size}")));
    }
    if rail_count == 0 {
        return Err(Error::Config("rail_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut image = ballast(&mut rng, size);
    let vanish = s / 2.0 + rng.random_range(-0.1..=0.1) * s;
    let half_width = (0.15 * s).min(0.38 * s / rail_count as f64);
    let tracks: Vec<Track> = (0..rail_count)
        .map(|k| {
            let slot = s * (k as f64 + 0.5) / rail_count as f64;
            let spread = if rail_count == 1 { 0.12 } else { 0.03 };
            Track { bottom_center: slot + rng.random_range(-spread..=spread) * s, half_width }
        })
        .collect();
    let rail_color = jitter(&mut rng, [0.22, 0.21, 0.20], 0.04);
    let tie_color = jitter(&mut rng, [0.42, 0.33, 0.24], 0.05);
    let tie_period = 0.1 * s;
    let phase: f64 = rng.random();

    let mut rail_mask = Array2::from_elem((size, size), false);
    let mut progress = phase;
    for r in (0..size).rev() {
        // 0.6 at the top row, 1.0 at the bottom row
        let depth = 0.6 + 0.4 * r as f64 / (s - 1.0);
        progress += 1.0 / (tie_period * depth);
        let on_tie = progress.fract() < 0.4;
        for t in &tracks {
            let center = vanish + (t.bottom_center - vanish) * depth;
            let hw = t.half_width * depth;
            let rail_w = (0.035 * s * depth).max(1.0);
            let tie_ext = 0.04 * s * depth;
            for c in 0..size {
                let x = c as f64 + 0.5;
                let off = (x - center).abs();
                if off <= hw {
                    rail_mask[[r, c]] = true;
                }
                let on_rail = off <= hw && off > hw - rail_w;
                if on_rail {
                    paint(&mut image, r, c, rail_color, &mut rng, 0.02);
                } else if on_tie && off <= hw + tie_ext {
                    paint(&mut image, r, c, tie_color, &mut rng, 0.03);
                }
            }
        }
    }
    quantize_8bit(&mut image);
    let mut scene = RailwayScene {
        scene_id: format!("toy{seed:016x}"),
        provenance: Provenance::Procedural,
        image,
        rail_mask,
        obstacle: None,
    };
    if obstacle {
        scene = add_toy_obstacle(&scene, rng.random())?;
    }
    Ok(scene)
}

/// Augmentation tuned for the small toy resolution.
fn toy_augmentation(seed: u64) -> AugmentationParams {
    AugmentationParams {
        feather_radius_px: 1,
        brightness_match: false,
        motion_blur_len_px: 3,
        motion_blur_angle_deg: None,
        depth_blur_sigma: 0.5,
        noise_sigma: 0.01,
        scale_range: (0.8, 1.0),
        rng_seed: seed,
    }
}

fn add_toy_obstacle(scene: &RailwayScene, seed: u64) -> Result<RailwayScene> {
    let size = scene.height().min(scene.width()) as f64;
    // Rejects slivers left over after blurring and feathering.
    let min_area = (size * size / 160.0).max(9.0);
    for attempt in 0..32 {
        let sub = derive_seed(seed, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let extent = (size * rng.random_range(0.14..=0.28)).round() as usize;
        let (img, mask, label) = shape_with(&mut rng, extent);
        if !mask.iter().any(|&v| v) {
            continue;
        }
        let mut out = match composite_obstacle(scene, &img, &mask, &toy_augmentation(rng.random())) {
            Err(Error::ObstacleVanished) => continue,
            other => other?,
        };
        let obs = out.obstacle.as_mut().expect("composite sets an obstacle");
        let hits_rail = obs.mask.iter().zip(scene.rail_mask.iter()).any(|(&o, &r)| o && r);
        let area = obs.mask.iter().filter(|&&v| v).count() as f64;
        if hits_rail && area >= min_area {
            obs.source_label = label.to_string();
            out.provenance = Provenance::Procedural;
            quantize_8bit(&mut out.image);
            return Ok(out);
        }
    }
    Err(Error::InvalidScene { scene_id: scene.scene_id.clone(), reason: "could not place an obstacle on the rails".into() })
}

/// A random image with no railway content: gradients, coloured noise
/// textures, shape collages, or rail-free ballast.
pub fn gen_nonrail_image(size: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = rng.random_range(0..4);
    let mut img = match kind {
        0 | 2 => {
            let c0: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let c1: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let noise = value_noise(&mut rng, size, 4);
            let (sin, cos) = rng.random_range(0.0f32..std::f32::consts::TAU).sin_cos();
            Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
                let t = ((r as f32 * sin + c as f32 * cos) / size as f32 + 1.0) / 2.0;
                (c0[ch] * (1.0 - t) + c1[ch] * t + 0.3 * (noise[[r, c]] - 0.5)).clamp(0.0, 1.0)
            })
        }
        1 => {
            let cells = rng.random_range(2..=16);
            let layers: Vec<Array2<f32>> = (0..3).map(|_| value_noise(&mut rng, size, cells)).collect();
            let grain = Normal::new(0.0f32, rng.random_range(0.0..0.1)).unwrap();
            Array3::from_shape_fn((size, size, 3), |(r, c, ch)| (layers[ch][[r, c]] + grain.sample(&mut rng)).clamp(0.0, 1.0))
        }
        _ => ballast(&mut rng, size),
    };
    if kind >= 2 {
        for _ in 0..rng.random_range(1..=6) {
            let extent = rng.random_range(size / 8..=size / 2).max(3);
            let (shape, mask, _) = shape_with(&mut rng, extent);
            let top = rng.random_range(0..=size - extent);
            let left = rng.random_range(0..=size - extent);
            for ((r, c), &v) in mask.indexed_iter() {
                if v {
                    for ch in 0..3 {
                        img[[top + r, left + c, ch]] = shape[[r, c, ch]];
                    }
                }
            }
        }
    }
    quantize_8bit(&mut img);
    img
}
