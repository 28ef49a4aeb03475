//! Scene types and dataset construction: region-of-interest crops, obstacle
//! compositing, procedural toy scenes, and the on-disk dataset layout.

mod composite;
mod crops;
mod io;
mod toy;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use composite::{composite_obstacle, AugmentationParams};
pub use crops::extract_roi_crops;
pub use io::{read_dataset, read_image_dir, read_object_dir, write_dataset, write_image_dir, write_object_dir, ObjectCutout};
pub use toy::{gen_nonrail_image, gen_toy_scene, random_shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealCrop,
    Composited,
    Procedural,
}

/// Inclusive pixel bounds `(row_min, col_min, row_max, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    /// Tight bounds of the `true` pixels, or `None` for an empty mask.
    pub fn of_mask(mask: &Array2<bool>) -> Option<BBox> {
        let mut bbox: Option<BBox> = None;
        for ((r, c), &v) in mask.indexed_iter() {
            if !v {
                continue;
            }
            let b = bbox.get_or_insert(BBox { row_min: r, col_min: c, row_max: r, col_max: c });
            b.row_min = b.row_min.min(r);
            b.col_min = b.col_min.min(c);
            b.row_max = b.row_max.max(r);
            b.col_max = b.col_max.max(c);
        }
        bbox
    }

    /// Whether a continuous point lies inside the box, edges included.
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.row_min as f64 && row <= self.row_max as f64 && col >= self.col_min as f64 && col <= self.col_max as f64
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.row_min, self.col_min, self.row_max, self.col_max]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        BBox { row_min: a[0], col_min: a[1], row_max: a[2], col_max: a[3] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleAnnotation {
    pub mask: Array2<bool>,
    pub bbox: BBox,
    /// Informational only; training never reads it.
    pub source_label: String,
}

impl ObstacleAnnotation {
    pub fn from_mask(mask: Array2<bool>, source_label: impl Into<String>) -> Result<Self> {
        let bbox = BBox::of_mask(&mask).ok_or(Error::EmptyObjectMask)?;
        Ok(ObstacleAnnotation { mask, bbox, source_label: source_label.into() })
    }
}

/// An RGB image (`H x W x 3`, values in `[0, 1]`) with its railway mask and
/// an optional obstacle annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct RailwayScene {
    pub scene_id: String,
    pub provenance: Provenance,
    pub image: Array3<f32>,
    pub rail_mask: Array2<bool>,
    pub obstacle: Option<ObstacleAnnotation>,
}

impl RailwayScene {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidScene { scene_id: self.scene_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(self.invalid(format!("image has {c} channels, expected 3")));
        }
        if self.image.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(self.invalid("image values must be finite and in [0, 1]"));
        }
        if self.rail_mask.dim() != (h, w) {
            return Err(self.invalid("rail mask size differs from image"));
        }
        if let Some(obs) = &self.obstacle {
            if obs.mask.dim() != (h, w) {
                return Err(self.invalid("obstacle mask size differs from image"));
            }
            match BBox::of_mask(&obs.mask) {
                None => return Err(self.invalid("obstacle mask is empty")),
                Some(b) if b != obs.bbox => {
                    return Err(self.invalid(format!(
                        "obstacle bbox {:?} is not the tight bounds {:?} of its mask",
                        obs.bbox.to_array(),
                        b.to_array()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Network input: `[1, 3, H, W]` scaled to `[-1, 1]`.
    pub fn to_tensor(&self) -> Array4<f32> {
        image_to_tensor(&self.image)
    }
}

/// `H x W x 3` image in `[0, 1]` to a `[1, 3, H, W]` tensor in `[-1, 1]`.
pub fn image_to_tensor(image: &Array3<f32>) -> Array4<f32> {
    image.view().permuted_axes([2, 0, 1]).mapv(|v| 2.0 * v - 1.0).insert_axis(Axis(0))
}

/// Rounds every value to the nearest multiple of 1/255, the precision of
/// the 8-bit files datasets are stored in.
pub fn quantize_8bit(image: &mut Array3<f32>) {
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Seed for item `index` derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
