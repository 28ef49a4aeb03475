//! Dataset directories: `manifest.json`, `images/<id>.png` (8-bit RGB),
//! `rail_masks/<id>.png` and `obstacle_masks/<id>.png` (8-bit grey, 255 = set).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{BBox, ObstacleAnnotation, Provenance, RailwayScene};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFiles {
    image: String,
    rail_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    obstacle_mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    scene_id: String,
    provenance: Provenance,
    files: SceneFiles,
    #[serde(default)]
    bbox: Option<[usize; 4]>,
    #[serde(default)]
    source_label: Option<String>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        image::Rgb([to_u8(image[[r, c, 0]]), to_u8(image[[r, c, 1]]), to_u8(image[[r, c, 2]])])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0
    }))
}

fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0] >= 128))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes scenes as PNG files plus a manifest. Images are stored at 8-bit
/// precision, so the round trip is exact for quantized scenes.
pub fn write_dataset(scenes: &[RailwayScene], dir: &Path) -> Result<()> {
    for sub in ["images", "rail_masks", "obstacle_masks"] {
        create_dir(&dir.join(sub))?;
    }
    let mut manifest = Vec::with_capacity(scenes.len());
    for scene in scenes {
        scene.validate()?;
        let id = &scene.scene_id;
        let files = SceneFiles {
            image: format!("images/{id}.png"),
            rail_mask: format!("rail_masks/{id}.png"),
            obstacle_mask: scene.obstacle.as_ref().map(|_| format!("obstacle_masks/{id}.png")),
        };
        save_rgb(&scene.image, &dir.join(&files.image))?;
        save_mask(&scene.rail_mask, &dir.join(&files.rail_mask))?;
        if let (Some(obs), Some(f)) = (&scene.obstacle, &files.obstacle_mask) {
            save_mask(&obs.mask, &dir.join(f))?;
        }
        manifest.push(ManifestEntry {
            scene_id: id.clone(),
            provenance: scene.provenance,
            files,
            bbox: scene.obstacle.as_ref().map(|o| o.bbox.to_array()),
            source_label: scene.obstacle.as_ref().map(|o| o.source_label.clone()),
        });
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`write_dataset`], validating every scene.
pub fn read_dataset(dir: &Path) -> Result<Vec<RailwayScene>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Dataset { path: path.clone(), reason: e.to_string() })?;
    let bad = |file: &PathBuf, id: &str, reason: &str| Error::Dataset { path: file.clone(), reason: format!("scene {id}: {reason}") };
    let mut scenes = Vec::with_capacity(entries.len());
    for e in entries {
        let id = e.scene_id.as_str();
        let existing = |rel: &str, what: &str| -> Result<PathBuf> {
            let p = dir.join(rel);
            if p.is_file() {
                Ok(p)
            } else {
                Err(bad(&p, id, &format!("missing {what} file")))
            }
        };
        let image = load_rgb(&existing(&e.files.image, "image")?)?;
        let rail_mask = load_mask(&existing(&e.files.rail_mask, "rail mask")?)?;
        let obstacle = match (&e.files.obstacle_mask, e.bbox) {
            (None, None) => None,
            (Some(f), Some(bbox)) => {
                let p = existing(f, "obstacle mask")?;
                let mask = load_mask(&p)?;
                let tight = BBox::of_mask(&mask).ok_or_else(|| bad(&p, id, "obstacle mask is empty"))?;
                if tight.to_array() != bbox {
                    return Err(bad(&path, id, &format!("bbox {bbox:?} disagrees with mask bounds {:?}", tight.to_array())));
                }
                Some(ObstacleAnnotation { mask, bbox: tight, source_label: e.source_label.clone().unwrap_or_default() })
            }
            _ => return Err(bad(&path, id, "obstacle mask and bbox must be given together")),
        };
        let scene = RailwayScene { scene_id: e.scene_id.clone(), provenance: e.provenance, image, rail_mask, obstacle };
        scene.validate().map_err(|err| bad(&path, id, &err.to_string()))?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Writes plain images as `<index>.png`.
pub fn write_image_dir(images: &[Array3<f32>], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (i, img) in images.iter().enumerate() {
        save_rgb(img, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

fn png_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads every `.png` in `dir`, in file-name order.
pub fn read_image_dir(dir: &Path) -> Result<Vec<Array3<f32>>> {
    png_paths(dir)?.iter().map(|p| load_rgb(p)).collect()
}

/// A segmented object to paste into scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCutout {
    pub label: String,
    pub image: Array3<f32>,
    pub mask: Array2<bool>,
}

/// Reads RGBA `.png` cutouts from `dir` in file-name order. Alpha >= 128
/// marks the object; the label is the file stem.
pub fn read_object_dir(dir: &Path) -> Result<Vec<ObjectCutout>> {
    let mut out = Vec::new();
    for path in png_paths(dir)? {
        let img = image::open(&path).map_err(|source| Error::Image { path: path.clone(), source })?.to_rgba8();
        let (w, h) = img.dimensions();
        let image = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| img.get_pixel(c as u32, r as u32)[ch] as f32 / 255.0);
        let mask = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[3] >= 128);
        if !mask.iter().any(|&m| m) {
            return Err(Error::Dataset { path, reason: "object has no opaque pixel".into() });
        }
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(ObjectCutout { label, image, mask });
    }
    Ok(out)
}

/// Writes cutouts as RGBA `<label>.png` files.
pub fn write_object_dir(objects: &[ObjectCutout], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for o in objects {
        let (h, w, _) = o.image.dim();
        let buf = image::RgbaImage::from_fn(w as u32, h as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            let a = if o.mask[[r, c]] { 255 } else { 0 };
            image::Rgba([to_u8(o.image[[r, c, 0]]), to_u8(o.image[[r, c, 1]]), to_u8(o.image[[r, c, 2]]), a])
        });
        let path = dir.join(format!("{}.png", o.label));
        buf.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
